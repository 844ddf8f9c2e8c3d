"""ELBO optimization: loss assembly, Adam, and the epoch loop.

Training maximizes teacher-forced reconstruction log-likelihood of future
velocities under the per-step mixtures minus a beta-weighted KL between the
posterior and prior Bernoulli heads. One latent sample per trajectory per
batch (single-sample Monte-Carlo estimate of the expectation).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import NumericError, Tensor, constant
from .model import (
    RTModel,
    bernoulli_kl_graph,
    gmm_log_density_graph,
    pack_histories,
    save_model,
)
from .prediction import integrate_velocities, rollout_most_likely
from .simdata import _splitmix64, featurize


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 256
    epochs: int = 20
    beta: float = 1.0
    anneal_beta: bool = False  # ramp 0 -> beta over the first 10% of steps
    grad_clip: float = 1.0
    seed: int = 0
    tau0: float = 1.0
    tau_decay: float = 0.9995
    tau_floor: float = 0.3
    patience: int = 10  # early stop after this many non-improving epochs
    feedback: str = "mix"  # decoder feedback during training (sample|truth|mix)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")


class Adam:
    """Adaptive-moment optimizer over a list of parameter tensors."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= (self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)).astype(
                np.float32
            )


def clip_global_norm(params, max_norm: float) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = np.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = np.float32(max_norm / norm)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


# -- loss -------------------------------------------------------------------------


def _sample_feedback(model: RTModel, raw, rng) -> np.ndarray:
    """Detached per-row draw from the step's mixture (decoder feedback)."""
    from .gmm import chol_from_raw, softmax_last

    c = model.cfg.gmm_components
    b = raw.mean.data.shape[0]
    means = raw.mean.data.astype(np.float64).reshape(b, c, 3)
    chols = chol_from_raw(raw.chol.data.reshape(b, c, 6))
    w = softmax_last(raw.logits.data)
    comp = (rng.random((b, 1)) > np.cumsum(w, axis=1)).sum(axis=1)
    idx = np.arange(b)
    z = rng.standard_normal((b, 3))
    return (means[idx, comp] + np.einsum("nij,nj->ni", chols[idx, comp], z)).astype(
        np.float32
    )


def _mean_feedback(model: RTModel, raw) -> np.ndarray:
    """Detached mixture expectation (the inference-time feedback)."""
    from .gmm import softmax_last

    c = model.cfg.gmm_components
    b = raw.mean.data.shape[0]
    means = raw.mean.data.astype(np.float64).reshape(b, c, 3)
    w = softmax_last(raw.logits.data)
    return (w[:, :, None] * means).sum(axis=1).astype(np.float32)


def elbo_loss(model: RTModel, batch, beta: float, rng, tau: float = 1.0,
              straight_through: bool = True, feedback: str = "sample") -> Tensor:
    """Scalar training loss for one packed batch.

    batch keys: x (B,Tmax,9), x_mask (B,Tmax), y (B,T,3), y_mask (B,T),
    last_vel (B,3). The decoder's previous-velocity input follows the
    model's own sampled prediction (feedback="sample", detached), matching
    how the decoder is rolled out after training; feedback="truth"
    teacher-forces ground truth instead (fully differentiable, used by the
    gradient-check oracle).
    """
    if feedback not in ("sample", "truth", "mix", "mix-mean"):
        raise ValueError(f"unknown feedback mode {feedback!r}")
    h = model.encode_past(batch["x"], batch["x_mask"])
    h_plus = model.encode_future(batch["y"], batch["y_mask"])
    q = model.posterior(h, h_plus)
    p = model.prior(h)
    r = model.sample_latent(q, "train-relaxed", rng, tau=tau,
                            straight_through=straight_through)

    state = model.init_decoder_state(h)
    y = batch["y"]
    y_mask = batch["y_mask"]
    b = y.shape[0]
    recon = constant(np.zeros((b, 1), dtype=np.float32))
    y_prev = constant(batch["last_vel"].astype(np.float32))
    for t in range(model.cfg.horizon):
        raw, state = model.decode_step(y_prev, r, state)
        logp = gmm_log_density_graph(raw, y[:, t, :], model.cfg.gmm_components)
        recon = recon + logp * constant(y_mask[:, t : t + 1])
        if feedback == "sample":
            y_prev = constant(_sample_feedback(model, raw, rng))
        elif feedback in ("mix", "mix-mean"):
            if feedback == "mix":
                own = _sample_feedback(model, raw, rng)
            else:
                own = _mean_feedback(model, raw)
            take_own = rng.random((b, 1)) < 0.5
            y_prev = constant(np.where(take_own, own, y[:, t, :]).astype(np.float32))
        else:
            y_prev = constant(y[:, t, :].astype(np.float32))

    kl = bernoulli_kl_graph(q, p)
    return (kl * float(beta) - recon).mean()


# -- batching ------------------------------------------------------------------------


def make_training_batches(trajs, horizon: int, batch_size: int, rng):
    """Per-epoch windows: one uniform t_obs per trajectory, bucketed by length.

    Sorting by history length before slicing into batches keeps padding
    waste low; batch order is then shuffled.
    """
    samples = []
    for traj in trajs:
        n = len(traj)
        if n < 4:
            continue
        t_obs = int(rng.integers(2, n - 1))  # [2, n-2]
        samples.append(featurize(traj, t_obs, horizon))
    samples.sort(key=lambda s: s.x.shape[0])
    batches = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        x, x_mask = pack_histories([s.x for s in chunk])
        batches.append({
            "x": x,
            "x_mask": x_mask,
            "y": np.stack([s.y for s in chunk]),
            "y_mask": np.stack([s.y_mask for s in chunk]),
            "last_vel": np.stack([s.last_velocity for s in chunk]),
            "origin": np.stack([s.origin for s in chunk]),
        })
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def validation_windows(trajs, horizon: int):
    """Deterministic per-trajectory cuts (hash-seeded), each with a future."""
    out = []
    for traj in trajs:
        n = len(traj)
        if n < 4:
            continue
        t_obs = 2 + _splitmix64(traj.id * 31 + 7) % (n - 3)
        out.append(featurize(traj, t_obs, horizon))
    return out


def most_likely_ade_mm(model: RTModel, samples, chunk: int = 512) -> float:
    """Mean ADE (mm) of the deterministic prediction over featurized samples."""
    errs = []
    for i in range(0, len(samples), chunk):
        part = samples[i : i + chunk]
        x, x_mask = pack_histories([s.x for s in part])
        last_vel = np.stack([s.last_velocity for s in part])
        out = rollout_most_likely(model, x, x_mask, last_vel)
        for b, s in enumerate(part):
            valid = s.y_mask > 0
            if not valid.any():
                continue
            pred = integrate_velocities(s.origin, out["velocities"][b], model.cfg.dt)
            d = np.linalg.norm(pred[valid] - s.future_positions[valid], axis=1)
            errs.append(d.mean())
    return float(np.mean(errs) * 1000.0)


def should_stop(val_history, patience: int) -> bool:
    """True once the last `patience` epochs never improved on the best before them."""
    if len(val_history) <= patience:
        return False
    best_before = min(val_history[: -patience])
    return all(v > best_before for v in val_history[-patience:])


# -- the loop -----------------------------------------------------------------------


def train(model: RTModel, train_trajs, val_trajs, cfg: TrainConfig, ckpt_path,
          report_path=None, verbose: bool = True):
    """Optimize in place; checkpoint at the best validation ADE.

    Returns the per-epoch report: [{epoch, train_loss, val_ade}, ...].
    """
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.lr)
    val_samples = validation_windows(val_trajs, model.cfg.horizon)

    n_batches = max(1, int(np.ceil(len(train_trajs) / cfg.batch_size)))
    anneal_steps = max(1, int(0.1 * cfg.epochs * n_batches))
    report = []
    best_val = np.inf
    val_history = []
    tau = cfg.tau0
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        skipped = []
        for i, batch in enumerate(make_training_batches(
                train_trajs, model.cfg.horizon, cfg.batch_size, rng)):
            beta = cfg.beta
            if cfg.anneal_beta:
                beta = cfg.beta * min(1.0, step / anneal_steps)
            opt.zero_grad()
            try:
                loss = elbo_loss(model, batch, beta, rng, tau=tau,
                                 feedback=cfg.feedback)
                loss.backward()
            except NumericError:
                skipped.append(i)
                step += 1
                continue
            clip_global_norm(opt.params, cfg.grad_clip)
            opt.step()
            losses.append(loss.item())
            tau = max(cfg.tau_floor, tau * cfg.tau_decay)
            step += 1

        val_ade = most_likely_ade_mm(model, val_samples) if val_samples else np.nan
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses)),
                 "val_ade": val_ade}
        if skipped:
            entry["skipped_batches"] = skipped
        report.append(entry)
        if verbose:
            print(f"epoch {epoch:3d}  loss {entry['train_loss']:10.3f}  "
                  f"val_ade {val_ade:8.2f} mm")

        val_history.append(val_ade)
        if val_ade < best_val:
            best_val = val_ade
            save_model(model, ckpt_path, extra={"val_ade_mm": f"{val_ade:.6f}"})
        if should_stop(val_history, cfg.patience):
            break

    if report_path is not None:
        with open(report_path, "w", encoding="utf-8") as fh:
            for entry in report:
                fh.write(json.dumps(entry) + "\n")
    return report
