"""Dense float32 tensors with reverse-mode automatic differentiation.

Minimal op set for recurrent sequence models: 2-D matmul, elementwise
arithmetic, last-axis concat/slice/softmax, sigmoid/tanh/exp/log,
reductions, and clamping against constants. Tensors are float32; the only
implicit broadcast is a rank-1 bias added over the last axis. Every op
validates shapes up front and checks its output for NaN/Inf.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible for the requested op."""


class NumericError(ArithmeticError):
    """An op produced NaN or Inf."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _finite_or_raise(out: np.ndarray, op: str) -> None:
    # One fused reduction pass; NaN/Inf anywhere poisons the float64 sum.
    if not np.isfinite(out.sum(dtype=np.float64)):
        raise NumericError(f"{op}: non-finite values in output")


def _as_f32(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float32)
    return arr


class Tensor:
    """A node in the computation graph.

    `data` is a contiguous float32 ndarray. Results of ops carry a backward
    closure and references to their parents; calling `backward()` on a
    scalar result accumulates d(result)/d(leaf) into each `requires_grad`
    leaf's `.grad` (additively, so callers must zero grads between steps).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f32(data)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    # -- graph plumbing ----------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents, backward, op: str) -> "Tensor":
        _finite_or_raise(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        track = _grad_enabled and any(p.requires_grad for p in parents)
        if track:
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has {self.data.size} elements")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op})"

    # -- backward ----------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode pass from a scalar output."""
        if self.data.size != 1:
            raise ShapeError(
                f"backward: output must be scalar, got shape {self.data.shape}"
            )
        # Iterative topological sort; graphs from long rollouts overflow
        # the recursion limit.
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- elementwise arithmetic ---------------------------------------------

    def __add__(self, other):
        if isinstance(other, (int, float)):
            out_data = self.data + np.float32(other)

            def bwd(g, a=self):
                a._accum(g)

            return Tensor._from_op(out_data, (self,), bwd, "add")
        if self.data.shape == other.data.shape:
            out_data = self.data + other.data

            def bwd(g, a=self, b=other):
                a._accum(g)
                b._accum(g)

            return Tensor._from_op(out_data, (self, other), bwd, "add")
        # bias add: rank-1 over the last axis
        if other.data.ndim == 1 and other.data.shape[0] == self.data.shape[-1]:
            out_data = self.data + other.data

            def bwd(g, a=self, b=other):
                a._accum(g)
                b._accum(g.reshape(-1, g.shape[-1]).sum(axis=0))

            return Tensor._from_op(out_data, (self, other), bwd, "add")
        raise ShapeError(f"add: shapes {self.data.shape} and {other.data.shape}")

    def __radd__(self, other):
        return self.__add__(other)

    def __neg__(self):
        out_data = -self.data

        def bwd(g, a=self):
            a._accum(-g)

        return Tensor._from_op(out_data, (self,), bwd, "neg")

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return self.__add__(-other)
        return self.__add__(other.__neg__())

    def __rsub__(self, other):
        # other - self, scalar other
        return self.__neg__().__add__(other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            s = np.float32(other)
            out_data = self.data * s

            def bwd(g, a=self, s=s):
                a._accum(g * s)

            return Tensor._from_op(out_data, (self,), bwd, "mul")
        if self.data.shape != other.data.shape:
            raise ShapeError(f"mul: shapes {self.data.shape} and {other.data.shape}")
        out_data = self.data * other.data

        def bwd(g, a=self, b=other):
            a._accum(g * b.data)
            b._accum(g * a.data)

        return Tensor._from_op(out_data, (self, other), bwd, "mul")

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return self.__mul__(1.0 / other)
        if self.data.shape != other.data.shape:
            raise ShapeError(f"div: shapes {self.data.shape} and {other.data.shape}")
        out_data = self.data / other.data

        def bwd(g, a=self, b=other, out=out_data):
            a._accum(g / b.data)
            b._accum(-g * out / b.data)

        return Tensor._from_op(out_data, (self, other), bwd, "div")

    # -- matmul and shape ops -----------------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ShapeError(
                f"matmul: expects 2-D operands, got {self.data.shape} @ {other.data.shape}"
            )
        if self.data.shape[1] != other.data.shape[0]:
            raise ShapeError(f"matmul: shapes {self.data.shape} @ {other.data.shape}")
        out_data = self.data @ other.data

        def bwd(g, a=self, b=other):
            a._accum(g @ b.data.T)
            b._accum(a.data.T @ g)

        return Tensor._from_op(out_data, (self, other), bwd, "matmul")

    def __matmul__(self, other):
        return self.matmul(other)

    def slice_last(self, start: int, stop: int) -> "Tensor":
        if not (0 <= start < stop <= self.data.shape[-1]):
            raise ShapeError(
                f"slice: [{start}:{stop}] out of bounds for shape {self.data.shape}"
            )
        out_data = np.ascontiguousarray(self.data[..., start:stop])

        def bwd(g, a=self, start=start, stop=stop):
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[..., start:stop] += g

        return Tensor._from_op(out_data, (self,), bwd, "slice")

    def expand_last(self, k: int) -> "Tensor":
        """Explicitly tile a trailing singleton axis to width k."""
        if self.data.shape[-1] != 1:
            raise ShapeError(f"expand_last: last axis must be 1, got {self.data.shape}")
        out_data = np.repeat(self.data, k, axis=-1)

        def bwd(g, a=self):
            a._accum(g.sum(axis=-1, keepdims=True))

        return Tensor._from_op(out_data, (self,), bwd, "expand_last")

    # -- nonlinearities -----------------------------------------------------

    def sigmoid(self) -> "Tensor":
        out_data = 1.0 / (1.0 + np.exp(-self.data))

        def bwd(g, a=self, y=out_data):
            a._accum(g * y * (1.0 - y))

        return Tensor._from_op(out_data, (self,), bwd, "sigmoid")

    def tanh(self) -> "Tensor":
        out_data = np.tanh(self.data)

        def bwd(g, a=self, y=out_data):
            a._accum(g * (1.0 - y * y))

        return Tensor._from_op(out_data, (self,), bwd, "tanh")

    def exp(self) -> "Tensor":
        with np.errstate(over="ignore"):  # overflow surfaces as NumericError
            out_data = np.exp(self.data)

        def bwd(g, a=self, y=out_data):
            a._accum(g * y)

        return Tensor._from_op(out_data, (self,), bwd, "exp")

    def log(self) -> "Tensor":
        with np.errstate(invalid="ignore", divide="ignore"):
            out_data = np.log(self.data)

        def bwd(g, a=self):
            a._accum(g / a.data)

        return Tensor._from_op(out_data, (self,), bwd, "log")

    def softmax(self) -> "Tensor":
        """Softmax over the last axis (max-shifted for stability)."""
        shifted = self.data - self.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=-1, keepdims=True)

        def bwd(g, a=self, y=out_data):
            dot = (g * y).sum(axis=-1, keepdims=True)
            a._accum((g - dot) * y)

        return Tensor._from_op(out_data, (self,), bwd, "softmax")

    # -- clamping against constants -------------------------------------------

    def clamp_min(self, c: float) -> "Tensor":
        out_data = np.maximum(self.data, np.float32(c))

        def bwd(g, a=self, c=c):
            a._accum(g * (a.data >= c))

        return Tensor._from_op(out_data, (self,), bwd, "clamp_min")

    def clamp_max(self, c: float) -> "Tensor":
        out_data = np.minimum(self.data, np.float32(c))

        def bwd(g, a=self, c=c):
            a._accum(g * (a.data <= c))

        return Tensor._from_op(out_data, (self,), bwd, "clamp_max")

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None) -> "Tensor":
        if axis is None:
            out_data = self.data.sum(dtype=np.float32).reshape(())

            def bwd(g, a=self):
                a._accum(np.broadcast_to(g, a.data.shape).astype(np.float32))

            return Tensor._from_op(out_data, (self,), bwd, "sum")
        if axis != -1:
            raise ShapeError("sum: only full reduction or axis=-1 supported")
        out_data = self.data.sum(axis=-1, keepdims=True, dtype=np.float32)

        def bwd(g, a=self):
            a._accum(np.broadcast_to(g, a.data.shape).astype(np.float32))

        return Tensor._from_op(out_data, (self,), bwd, "sum")

    def mean(self) -> "Tensor":
        n = self.data.size
        out_data = (self.data.sum(dtype=np.float32) / np.float32(n)).reshape(())

        def bwd(g, a=self, n=n):
            a._accum(np.broadcast_to(g / n, a.data.shape).astype(np.float32))

        return Tensor._from_op(out_data, (self,), bwd, "mean")


def concat(tensors, axis: int = -1) -> Tensor:
    """Concatenate along the last axis."""
    if axis != -1:
        raise ShapeError("concat: only the last axis is supported")
    lead = tensors[0].data.shape[:-1]
    for t in tensors[1:]:
        if t.data.shape[:-1] != lead:
            raise ShapeError(
                f"concat: leading dims differ: {[t.data.shape for t in tensors]}"
            )
    out_data = np.concatenate([t.data for t in tensors], axis=-1)
    widths = [t.data.shape[-1] for t in tensors]

    def bwd(g, ts=tuple(tensors), widths=tuple(widths)):
        ofs = 0
        for t, w in zip(ts, widths):
            t._accum(np.ascontiguousarray(g[..., ofs : ofs + w]))
            ofs += w

    return Tensor._from_op(out_data, tensors, bwd, "concat")


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


# -- recurrent cell ------------------------------------------------------------


@dataclass
class LSTMParams:
    """Packed gate weights; gate order along the last axis is [i, f, g, o]."""

    w_ih: Tensor  # (input_dim, 4*hidden)
    w_hh: Tensor  # (hidden, 4*hidden)
    b: Tensor  # (4*hidden,)

    @property
    def hidden_size(self) -> int:
        return self.w_hh.data.shape[0]

    def tensors(self):
        return [self.w_ih, self.w_hh, self.b]


def init_lstm(input_dim: int, hidden: int, rng: np.random.Generator) -> LSTMParams:
    k = 1.0 / np.sqrt(hidden)
    w_ih = parameter(rng.uniform(-k, k, size=(input_dim, 4 * hidden)))
    w_hh = parameter(rng.uniform(-k, k, size=(hidden, 4 * hidden)))
    b = np.zeros(4 * hidden, dtype=np.float32)
    b[hidden : 2 * hidden] = 1.0  # forget-gate bias keeps early memory open
    return LSTMParams(w_ih, w_hh, parameter(b))


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, params: LSTMParams):
    """One LSTM step: returns (h_t, c_t)."""
    hidden = params.hidden_size
    if x.data.shape[-1] != params.w_ih.data.shape[0]:
        raise ShapeError(
            f"lstm_cell: input width {x.data.shape[-1]} vs w_ih {params.w_ih.data.shape}"
        )
    if h_prev.data.shape[-1] != hidden or c_prev.data.shape[-1] != hidden:
        raise ShapeError(
            f"lstm_cell: state widths {h_prev.data.shape}/{c_prev.data.shape} "
            f"vs hidden {hidden}"
        )
    z = x.matmul(params.w_ih) + h_prev.matmul(params.w_hh) + params.b
    i = z.slice_last(0, hidden).sigmoid()
    f = z.slice_last(hidden, 2 * hidden).sigmoid()
    g = z.slice_last(2 * hidden, 3 * hidden).tanh()
    o = z.slice_last(3 * hidden, 4 * hidden).sigmoid()
    c_t = f * c_prev + i * g
    h_t = o * c_t.tanh()
    return h_t, c_t
