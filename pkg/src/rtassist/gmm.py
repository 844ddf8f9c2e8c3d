"""3-D Gaussian mixtures parameterized by Cholesky factors.

Used for the per-step velocity mixtures emitted by the decoder. Densities
go through triangular solves against L (never forming an explicit inverse),
sampling uses mu + L z.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import NumericError

LOG_2PI = float(np.log(2.0 * np.pi))

# raw diagonal is clamped here before exponentiation, keeping covariances
# from collapsing to singular during training
DIAG_RAW_FLOOR = float(np.log(1e-4))


@dataclass
class GaussianMixture:
    """Mixture of C Gaussians over R^3.

    means:   (C, 3)
    chols:   (C, 3, 3) lower triangular, positive diagonal
    weights: (C,) on the simplex
    """

    means: np.ndarray
    chols: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        c = self.means.shape[0]
        self.chols = np.asarray(self.chols, dtype=np.float64).reshape(c, 3, 3)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(c)
        if not np.isclose(self.weights.sum(), 1.0, atol=1e-5):
            raise ValueError(f"mixture weights sum to {self.weights.sum()}")

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    def covariances(self) -> np.ndarray:
        """Sigma_c = L_c L_c^T, shape (C, 3, 3)."""
        return self.chols @ np.swapaxes(self.chols, 1, 2)

    def log_density(self, v) -> float:
        """log sum_c alpha_c N(v; mu_c, L_c L_c^T) via log-sum-exp."""
        v = np.asarray(v, dtype=np.float64).reshape(3)
        diag = np.diagonal(self.chols, axis1=1, axis2=2)
        if np.any(diag < 1e-8):
            raise NumericError("gmm_log_density: singular Cholesky factor")
        d = v[None, :] - self.means  # (C, 3)
        # forward substitution, unrolled for the fixed 3-D case
        a0 = d[:, 0] / self.chols[:, 0, 0]
        a1 = (d[:, 1] - self.chols[:, 1, 0] * a0) / self.chols[:, 1, 1]
        a2 = (d[:, 2] - self.chols[:, 2, 0] * a0 - self.chols[:, 2, 1] * a1) / self.chols[:, 2, 2]
        quad = a0 * a0 + a1 * a1 + a2 * a2
        log_det = np.log(diag).sum(axis=1)
        log_comp = -0.5 * quad - log_det - 1.5 * LOG_2PI
        with np.errstate(divide="ignore"):
            log_w = np.log(self.weights)
        shifted = log_w + log_comp
        m = shifted.max()
        return float(m + np.log(np.exp(shifted - m).sum()))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        c = rng.choice(self.n_components, p=self.weights)
        z = rng.standard_normal(3)
        return self.means[c] + self.chols[c] @ z

    def sample_batch(self, rng: np.random.Generator, n: int) -> np.ndarray:
        cs = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, 3))
        return self.means[cs] + np.einsum("nij,nj->ni", self.chols[cs], z)


def chol_from_raw(chol_raw) -> np.ndarray:
    """(..., 6) raw head output -> (..., 3, 3) lower-triangular factors.

    Layout per component: [raw diag (3), off-diagonal L10 L20 L21 (3)].
    Diagonal is exp(clamped raw); off-diagonals pass through.
    """
    raw = np.asarray(chol_raw, dtype=np.float64)
    out = np.zeros(raw.shape[:-1] + (3, 3))
    diag = np.exp(np.maximum(raw[..., :3], DIAG_RAW_FLOOR))
    out[..., 0, 0] = diag[..., 0]
    out[..., 1, 1] = diag[..., 1]
    out[..., 2, 2] = diag[..., 2]
    out[..., 1, 0] = raw[..., 3]
    out[..., 2, 0] = raw[..., 4]
    out[..., 2, 1] = raw[..., 5]
    return out


def softmax_last(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def mixture_from_raw(mean_raw, chol_raw, weight_logits) -> GaussianMixture:
    """Map raw decoder head outputs (one step, C components) to a mixture."""
    mean_raw = np.asarray(mean_raw, dtype=np.float64).reshape(-1, 3)
    c = mean_raw.shape[0]
    chols = chol_from_raw(np.asarray(chol_raw, dtype=np.float64).reshape(c, 6))
    weights = softmax_last(np.asarray(weight_logits, dtype=np.float64).reshape(c))
    return GaussianMixture(mean_raw, chols, weights)
