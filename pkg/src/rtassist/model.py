"""Reach-trajectory prediction network.

A CVAE over future end-effector velocities: a past-history LSTM encoder, a
bidirectional future encoder (training only), factorized Bernoulli latent
heads, and a recurrent decoder emitting one velocity-space Gaussian mixture
per future step. All learnable state lives in float32 autodiff tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import LSTMParams, Tensor, concat, constant, init_lstm, lstm_cell
from .gmm import DIAG_RAW_FLOOR, LOG_2PI, GaussianMixture, mixture_from_raw

PROB_CLAMP = 1e-6
CKPT_MAGIC = "rt-ckpt-1"

# fixed per-channel input gains for the 9-d feature rows
# [rel position (m), velocity (m/s), acceleration (m/s^2)]; accelerations from
# tick-level multiplicative noise reach tens of m/s^2, so they are damped to
# keep encoder gates out of saturation
INPUT_GAINS = np.array([2.0, 2.0, 2.0, 4.0, 4.0, 4.0, 0.1, 0.1, 0.1],
                       dtype=np.float32)

# initial raw Cholesky diagonal bias: start mixtures near the data's
# velocity scale instead of unit variance
CHOL_DIAG_BIAS0 = -2.3


@dataclass
class ModelConfig:
    hidden_size: int = 128
    latent_dims: int = 5
    gmm_components: int = 4
    input_dim: int = 9
    output_dim: int = 3
    horizon: int = 20
    dt: float = 0.05

    def __post_init__(self):
        if self.latent_dims < 1 or self.gmm_components < 1 or self.horizon < 1:
            raise ValueError("latent_dims, gmm_components, horizon must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")


@dataclass
class LatentDistribution:
    """Factorized Bernoulli parameters, each strictly inside (0, 1)."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64).reshape(-1)
        if np.any(self.probs <= 0) or np.any(self.probs >= 1):
            raise ValueError("Bernoulli probs must lie strictly in (0,1)")


@dataclass
class RawMixture:
    """Unconstrained decoder head outputs for one step (graph tensors)."""

    mean: Tensor  # (B, C*3)
    chol: Tensor  # (B, C*6): per component [diag raw (3), L10 L20 L21]
    logits: Tensor  # (B, C)


def _linear(rng, n_in, n_out):
    k = 1.0 / np.sqrt(n_in)
    w = ad.parameter(rng.uniform(-k, k, size=(n_in, n_out)))
    b = ad.parameter(np.zeros(n_out, dtype=np.float32))
    return w, b


def pack_histories(xs):
    """Left-pad variable-length sequences into (B, Tmax, D) plus a step mask.

    Left padding puts every sequence's final step at the last slot, so the
    encoder's terminal state is read from one place for the whole batch.
    """
    tmax = max(x.shape[0] for x in xs)
    d = xs[0].shape[1]
    batch = np.zeros((len(xs), tmax, d), dtype=np.float32)
    mask = np.zeros((len(xs), tmax), dtype=np.float32)
    for b, x in enumerate(xs):
        batch[b, tmax - x.shape[0] :] = x
        mask[b, tmax - x.shape[0] :] = 1.0
    return batch, mask


def _log_softmax(logits: Tensor) -> Tensor:
    c = logits.data.shape[-1]
    m = constant(np.repeat(logits.data.max(axis=-1, keepdims=True), c, axis=-1))
    z = logits - m
    lse = z.exp().sum(axis=-1).log()
    return z - lse.expand_last(c)


class RTModel:
    """Encoders, latent heads and GMM decoder with a flat parameter table."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        h, n, c = cfg.hidden_size, cfg.latent_dims, cfg.gmm_components

        self.enc = init_lstm(cfg.input_dim, h, rng)
        self.fut_f = init_lstm(cfg.output_dim, h, rng)
        self.fut_b = init_lstm(cfg.output_dim, h, rng)
        self.fut_proj_w, self.fut_proj_b = _linear(rng, 2 * h, h)
        self.pri_w1, self.pri_b1 = _linear(rng, h, h)
        self.pri_w2, self.pri_b2 = _linear(rng, h, n)
        self.pos_w1, self.pos_b1 = _linear(rng, 2 * h, h)
        self.pos_w2, self.pos_b2 = _linear(rng, h, n)
        self.dec = init_lstm(cfg.output_dim + n, h, rng)
        self.head_mean_w, self.head_mean_b = _linear(rng, h, c * 3)
        self.head_chol_w, self.head_chol_b = _linear(rng, h, c * 6)
        for comp in range(c):
            self.head_chol_b.data[6 * comp : 6 * comp + 3] = CHOL_DIAG_BIAS0
        self.head_wt_w, self.head_wt_b = _linear(rng, h, c)

    # -- parameter table -----------------------------------------------------

    def named_parameters(self):
        out = {}
        for stem, p in (("enc", self.enc), ("fut_f", self.fut_f), ("fut_b", self.fut_b),
                        ("dec", self.dec)):
            out[f"{stem}.w_ih"] = p.w_ih
            out[f"{stem}.w_hh"] = p.w_hh
            out[f"{stem}.b"] = p.b
        for name in ("fut_proj_w", "fut_proj_b", "pri_w1", "pri_b1", "pri_w2",
                     "pri_b2", "pos_w1", "pos_b1", "pos_w2", "pos_b2",
                     "head_mean_w", "head_mean_b", "head_chol_w", "head_chol_b",
                     "head_wt_w", "head_wt_b"):
            out[name] = getattr(self, name)
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_all_weights(self):
        for p in self.parameters():
            p.data[...] = 0.0

    # -- encoders --------------------------------------------------------------

    def _run_lstm(self, params: LSTMParams, batch, mask=None, reverse=False):
        b, t, _ = batch.shape
        h = constant(np.zeros((b, params.hidden_size), dtype=np.float32))
        c = constant(np.zeros((b, params.hidden_size), dtype=np.float32))
        order = range(t - 1, -1, -1) if reverse else range(t)
        for i in order:
            if mask is not None and not mask[:, i].any():
                continue  # fully padded step: state provably unchanged
            h_new, c_new = lstm_cell(constant(batch[:, i, :]), h, c, params)
            if mask is None or mask[:, i].all():
                h, c = h_new, c_new
            else:
                m = np.repeat(mask[:, i : i + 1], params.hidden_size, axis=1)
                keep = constant(1.0 - m)
                m = constant(m)
                h = m * h_new + keep * h
                c = m * c_new + keep * c
        return h, c

    def encode_past(self, x, mask=None) -> Tensor:
        """Hidden summary of the observed history, (B, hidden)."""
        x = np.asarray(x, dtype=np.float32)
        if x.ndim == 2:
            x = x[None]
        if x.shape[1] < 2:
            raise ValueError(f"encode_past: history must have >= 2 steps, got {x.shape[1]}")
        if x.shape[2] != self.cfg.input_dim:
            raise ad.ShapeError(f"encode_past: feature width {x.shape[2]} != {self.cfg.input_dim}")
        if x.shape[2] == INPUT_GAINS.shape[0]:
            x = x * INPUT_GAINS
        h, _ = self._run_lstm(self.enc, x, mask)
        return h

    def encode_future(self, y, mask=None) -> Tensor:
        """Bidirectional summary of future velocities (training only)."""
        y = np.asarray(y, dtype=np.float32)
        if y.ndim == 2:
            y = y[None]
        h_f, _ = self._run_lstm(self.fut_f, y, mask)
        h_b, _ = self._run_lstm(self.fut_b, y, mask, reverse=True)
        return concat([h_f, h_b]) @ self.fut_proj_w + self.fut_proj_b

    # -- latent heads ------------------------------------------------------------

    def _mlp_probs(self, x, w1, b1, w2, b2) -> Tensor:
        logits = (x @ w1 + b1).tanh() @ w2 + b2
        return logits.sigmoid().clamp_min(PROB_CLAMP).clamp_max(1.0 - PROB_CLAMP)

    def prior(self, h: Tensor) -> Tensor:
        return self._mlp_probs(h, self.pri_w1, self.pri_b1, self.pri_w2, self.pri_b2)

    def posterior(self, h: Tensor, h_plus: Tensor) -> Tensor:
        return self._mlp_probs(
            concat([h, h_plus]), self.pos_w1, self.pos_b1, self.pos_w2, self.pos_b2
        )

    def sample_latent(self, probs: Tensor, mode: str, rng=None, tau: float = 1.0,
                      straight_through: bool = True) -> Tensor:
        """Draw the discrete latent.

        train-relaxed: binary-concrete sample at temperature tau; with the
        straight-through flag the forward value is the hard threshold while
        the gradient flows through the relaxed sample.
        hard: exact Bernoulli draw. argmax: per-dimension threshold at 0.5,
        the mode of the factorized distribution.
        """
        if mode == "argmax":
            return constant((probs.data > 0.5).astype(np.float32))
        if mode == "hard":
            u = rng.random(probs.data.shape)
            return constant((u < probs.data).astype(np.float32))
        if mode == "train-relaxed":
            u = rng.random(probs.data.shape).astype(np.float32)
            noise = constant(np.log(u) - np.log1p(-u))
            logit = probs.log() - (1.0 - probs).log()
            s = ((logit + noise) * (1.0 / tau)).sigmoid()
            if not straight_through:
                return s
            hard = (s.data > 0.5).astype(np.float32)
            return s + constant(hard - s.data)
        raise ValueError(f"unknown latent sampling mode: {mode}")

    # -- decoder ---------------------------------------------------------------

    def init_decoder_state(self, h: Tensor):
        b = h.data.shape[0]
        return h, constant(np.zeros((b, self.cfg.hidden_size), dtype=np.float32))

    def decode_step(self, y_prev: Tensor, r: Tensor, state):
        """One decoder step: returns (RawMixture, new state)."""
        h, c = lstm_cell(concat([y_prev, r]), state[0], state[1], self.dec)
        raw = RawMixture(
            mean=h @ self.head_mean_w + self.head_mean_b,
            chol=h @ self.head_chol_w + self.head_chol_b,
            logits=h @ self.head_wt_w + self.head_wt_b,
        )
        return raw, (h, c)

    def mixtures_from_step(self, raw: RawMixture):
        """Extract per-sample numpy mixtures from one decode step."""
        c = self.cfg.gmm_components
        return [
            mixture_from_raw(
                raw.mean.data[b].reshape(c, 3),
                raw.chol.data[b].reshape(c, 6),
                raw.logits.data[b],
            )
            for b in range(raw.mean.data.shape[0])
        ]


def gmm_log_density_graph(raw: RawMixture, v, n_components: int) -> Tensor:
    """In-graph log density of velocities v (B,3) under the raw mixture, (B,1).

    Mirrors GaussianMixture.log_density: Mahalanobis terms by forward
    substitution against L, mixed by log-sum-exp. The raw diagonal is
    clamped before exponentiation, matching the inference-side mapping.
    """
    v = constant(np.asarray(v, dtype=np.float32))
    comps = []
    for c in range(n_components):
        mu = raw.mean.slice_last(3 * c, 3 * c + 3)
        d = v - mu
        craw = raw.chol.slice_last(6 * c, 6 * c + 6)
        draw = craw.slice_last(0, 3).clamp_min(DIAG_RAW_FLOOR)
        diag = draw.exp()
        d0, d1, d2 = (d.slice_last(i, i + 1) for i in range(3))
        l00, l11, l22 = (diag.slice_last(i, i + 1) for i in range(3))
        off = craw.slice_last(3, 6)
        l10, l20, l21 = (off.slice_last(i, i + 1) for i in range(3))
        a0 = d0 / l00
        a1 = (d1 - l10 * a0) / l11
        a2 = (d2 - l20 * a0 - l21 * a1) / l22
        quad = a0 * a0 + a1 * a1 + a2 * a2
        log_det = draw.sum(axis=-1)  # log diag == clamped raw
        comps.append(quad * -0.5 - log_det - 1.5 * LOG_2PI)
    log_comp = concat(comps)  # (B, C)
    x = _log_softmax(raw.logits) + log_comp
    m_data = x.data.max(axis=-1, keepdims=True)
    shifted = x - constant(np.repeat(m_data, n_components, axis=-1))
    return shifted.exp().sum(axis=-1).log() + constant(m_data)


def bernoulli_kl_graph(q: Tensor, p: Tensor) -> Tensor:
    """KL(Bern(q) || Bern(p)) summed over latent dims, (B,1)."""
    one_m_q = 1.0 - q
    one_m_p = 1.0 - p
    kl = q * (q.log() - p.log()) + one_m_q * (one_m_q.log() - one_m_p.log())
    return kl.sum(axis=-1)


# -- checkpoint format ------------------------------------------------------------
#
# Plain-text manifest followed by a contiguous little-endian float32 payload:
#
#   rt-ckpt-1
#   arch rt
#   <config key> <value>          (one per ModelConfig field)
#   tensor <name> <d0,d1,...> <byte offset>
#   ...
#   end
#   <raw float32 bytes>


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, cfg, named_tensors, arch: str = "rt", extra=None):
    lines = [CKPT_MAGIC, f"arch {arch}"]
    for f in fields(cfg):
        lines.append(f"{f.name} {getattr(cfg, f.name)}")
    for k, v in (extra or {}).items():
        lines.append(f"{k} {v}")
    offset = 0
    payload = []
    for name, t in named_tensors.items():
        arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t,
                                   dtype="<f4")
        dims = ",".join(str(d) for d in arr.shape)
        lines.append(f"tensor {name} {dims} {offset}")
        payload.append(arr.tobytes())
        offset += arr.nbytes
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for chunk in payload:
            fh.write(chunk)


def load_checkpoint(path):
    """Returns (meta dict, {name: float32 ndarray})."""
    with open(path, "rb") as fh:
        blob = fh.read()
    meta = {}
    specs = []
    pos = 0
    while True:
        nl = blob.find(b"\n", pos)
        if nl < 0:
            raise CheckpointError(f"{path}: truncated manifest (no end marker)")
        line = blob[pos:nl].decode("utf-8")
        pos = nl + 1
        if not meta and not specs and line != CKPT_MAGIC:
            raise CheckpointError(f"{path}: bad format marker {line!r}, "
                                  f"expected {CKPT_MAGIC!r}")
        if line == CKPT_MAGIC:
            meta["format"] = line
            continue
        if line == "end":
            break
        parts = line.split()
        if parts[0] == "tensor":
            name, dims, ofs = parts[1], parts[2], int(parts[3])
            shape = tuple(int(d) for d in dims.split(","))
            specs.append((name, shape, ofs))
        else:
            meta[parts[0]] = " ".join(parts[1:])
    payload = blob[pos:]
    tensors = {}
    for name, shape, ofs in specs:
        n = int(np.prod(shape))
        chunk = payload[ofs : ofs + 4 * n]
        if len(chunk) != 4 * n:
            raise CheckpointError(f"{path}: payload truncated for tensor {name}")
        tensors[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
    return meta, tensors


def _config_from_meta(meta) -> ModelConfig:
    cast = {"hidden_size": int, "latent_dims": int, "gmm_components": int,
            "input_dim": int, "output_dim": int, "horizon": int, "dt": float}
    return ModelConfig(**{k: cast[k](meta[k]) for k in cast if k in meta})


def save_model(model: RTModel, path, extra=None):
    save_checkpoint(path, model.cfg, model.named_parameters(), arch="rt", extra=extra)


def load_model(path) -> RTModel:
    meta, tensors = load_checkpoint(path)
    if meta.get("arch") != "rt":
        raise CheckpointError(f"{path}: arch {meta.get('arch')!r} is not an rt checkpoint")
    model = RTModel(_config_from_meta(meta), seed=0)
    params = model.named_parameters()
    if set(params) != set(tensors):
        missing = set(params) ^ set(tensors)
        raise CheckpointError(f"{path}: tensor set mismatch: {sorted(missing)}")
    for name, arr in tensors.items():
        if params[name].data.shape != arr.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {name}: "
                f"{arr.shape} vs {params[name].data.shape}"
            )
        params[name].data[...] = arr
    return model
