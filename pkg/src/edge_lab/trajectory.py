"""Gradient-descent runners and per-step trajectory logs.

Deterministic full-batch GD, noisy SGD (Gaussian or mini-batch residual
noise), and synchronized two-objective pairs. Logs keep every step
increment and loss densely; iterates may be thinned and are rebuilt
bit-exactly from the stored anchors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from numpy.typing import NDArray

from .loss_models import LossModel, MlpModel

__all__ = [
    "StepRecord",
    "TrajectoryLog",
    "StochasticTrajectoryLog",
    "PairedLog",
    "NoiseSource",
    "run_gd",
    "run_sgd",
    "run_pair_gd",
    "write_trajectory_csv",
    "run_summary",
]

Array = NDArray[np.float64]

# Runs abort (partial log, diverged flag) past these magnitudes.
LOSS_DIVERGENCE = 1e12
ITERATE_DIVERGENCE = 1e8


@dataclass(frozen=True)
class StepRecord:
    """One step of a logged run; ``d`` is None on the final record."""

    k: int
    w: Array
    loss: float
    grad: Array
    d: Array | None


@dataclass
class TrajectoryLog:
    """Complete per-step record of a gradient-descent run.

    ``steps[k]`` is w_{k+1} - w_k; losses and gradients are stored for
    every iterate 0..K. Iterates are stored every ``stride`` steps and
    reconstructed exactly by replaying the stored increments.
    """

    eta: float
    model_id: str
    losses: Array
    grads: Array
    steps: Array
    w_stored: Array
    stride: int = 1
    seed: int | None = None
    diverged: bool = False
    divergence_step: int | None = None

    @property
    def num_steps(self) -> int:
        return self.steps.shape[0]

    @property
    def dim(self) -> int:
        return self.grads.shape[1]

    def w(self, k: int) -> Array:
        if not 0 <= k <= self.num_steps:
            raise IndexError(f"step {k} outside 0..{self.num_steps}")
        anchor = k - (k % self.stride)
        x = self.w_stored[anchor // self.stride].copy()
        for j in range(anchor, k):
            x += self.steps[j]
        return x

    def record(self, k: int) -> StepRecord:
        d = self.steps[k] if k < self.num_steps else None
        return StepRecord(k, self.w(k), float(self.losses[k]), self.grads[k], d)

    def records(self) -> Iterator[StepRecord]:
        for k in range(self.num_steps + 1):
            yield self.record(k)


@dataclass
class StochasticTrajectoryLog(TrajectoryLog):
    """Trajectory log with the per-step gradient noise recorded exactly."""

    noise: Array = field(default_factory=lambda: np.zeros((0, 0)))


@dataclass
class PairedLog:
    """Two synchronized runs (shared step size and initialization)."""

    log_s: TrajectoryLog
    log_sp: TrajectoryLog

    def __post_init__(self):
        if self.log_s.eta != self.log_sp.eta:
            raise ValueError("paired runs must share the step size")
        if not np.array_equal(self.log_s.w(0), self.log_sp.w(0)):
            raise ValueError("paired runs must share the initial point")

    @property
    def num_steps(self) -> int:
        return min(self.log_s.num_steps, self.log_sp.num_steps)


def _diverged(loss: float, w: Array) -> bool:
    return (not np.isfinite(loss)) or loss > LOSS_DIVERGENCE \
        or (not np.all(np.isfinite(w))) or float(np.linalg.norm(w)) > ITERATE_DIVERGENCE


class NoiseSource:
    """Deterministic gradient-noise generator for SGD runs.

    Modes: ("gaussian", sigma) adds isotropic Gaussian noise of the
    given scale; ("minibatch", batch_size) uses the mini-batch gradient
    residual (batch gradient minus full gradient, batches sampled
    uniformly with replacement), which has zero conditional mean.
    """

    def __init__(self, mode: str, seed: int, sigma: float = 0.0,
                 batch_size: int = 0):
        if mode not in ("gaussian", "minibatch"):
            raise ValueError("noise mode must be 'gaussian' or 'minibatch'")
        self.mode = mode
        self.seed = int(seed)
        self.sigma = float(sigma)
        self.batch_size = int(batch_size)
        self._rng = np.random.default_rng(self.seed)

    def sample(self, model: LossModel, w: Array, grad: Array) -> Array:
        if self.mode == "gaussian":
            if self.sigma == 0.0:
                return np.zeros_like(grad)
            return self.sigma * self._rng.standard_normal(grad.shape)
        if not isinstance(model, MlpModel):
            raise ValueError("minibatch noise requires a dataset-backed model")
        idx = self._rng.integers(0, model.dataset.n, size=self.batch_size)
        return model.gradient_batch(w, idx) - grad


def run_gd(model: LossModel, w0: Array, eta: float, K: int,
           thin_stride: int = 1, seed: int | None = None) -> TrajectoryLog:
    """Full-batch gradient descent for K steps.

    On divergence (non-finite or exploding loss/iterate) the log is
    truncated at the offending step and flagged.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    if K < 1:
        raise ValueError("K must be at least 1")
    log = _run(model, w0, eta, K, thin_stride, noise=None, seed=seed)
    return log


def run_sgd(model: LossModel, w0: Array, eta: float, K: int,
            noise: NoiseSource, thin_stride: int = 1) -> StochasticTrajectoryLog:
    """Noisy gradient descent w_{k+1} = w_k - eta (grad + eps_k).

    The noise actually applied at each step is recorded verbatim.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    if K < 1:
        raise ValueError("K must be at least 1")
    return _run(model, w0, eta, K, thin_stride, noise=noise, seed=noise.seed)


def _run(model, w0, eta, K, thin_stride, noise, seed):
    w = np.atleast_1d(np.asarray(w0, dtype=float)).copy()
    if w.shape != (model.dim,):
        raise ValueError(f"w0 must have dimension {model.dim}")
    stride = max(int(thin_stride), 1)

    losses = [model.value(w)]
    grads = [model.gradient(w)]
    steps: list[Array] = []
    noises: list[Array] = []
    anchors = [w.copy()]
    diverged = False
    div_step = None

    if _diverged(losses[0], w):
        diverged, div_step = True, 0
        K = 0

    for k in range(K):
        g = grads[k]
        if noise is not None:
            eps = noise.sample(model, w, g)
            noises.append(eps)
            d = -eta * (g + eps)
        else:
            d = -eta * g
        w = w + d
        steps.append(d)
        loss = model.value(w)
        if _diverged(loss, w):
            diverged, div_step = True, k + 1
            steps.pop()
            if noise is not None:
                noises.pop()
            break
        losses.append(loss)
        grads.append(model.gradient(w))
        if (k + 1) % stride == 0:
            anchors.append(w.copy())

    kwargs = dict(
        eta=float(eta), model_id=model.name,
        losses=np.array(losses), grads=np.array(grads),
        steps=np.array(steps) if steps else np.zeros((0, model.dim)),
        w_stored=np.array(anchors), stride=stride, seed=seed,
        diverged=diverged, divergence_step=div_step)
    if noise is not None:
        return StochasticTrajectoryLog(
            noise=np.array(noises) if noises else np.zeros((0, model.dim)),
            **kwargs)
    return TrajectoryLog(**kwargs)


def run_pair_gd(model_s: LossModel, model_sp: LossModel, w0: Array,
                eta: float, K: int) -> PairedLog:
    """Synchronized GD on two objectives from a common initialization."""
    if model_s.dim != model_sp.dim:
        raise ValueError("paired models must share the parameter dimension")
    log_s = run_gd(model_s, w0, eta, K)
    log_sp = run_gd(model_sp, w0, eta, K)
    return PairedLog(log_s, log_sp)


def write_trajectory_csv(log: TrajectoryLog, path, include_w: bool = False) -> None:
    """Columns k, loss, grad_norm, step_norm (+ optional flattened iterate)."""
    header = ["k", "loss", "grad_norm", "step_norm"]
    if include_w:
        header += [f"w{i}" for i in range(log.dim)]
    rows = [",".join(header)]
    for k in range(log.num_steps + 1):
        step_norm = ("" if k >= log.num_steps
                     else f"{np.linalg.norm(log.steps[k]):.17g}")
        vals = [str(k), f"{log.losses[k]:.17g}",
                f"{np.linalg.norm(log.grads[k]):.17g}", step_norm]
        if include_w:
            vals += [f"{v:.17g}" for v in log.w(k)]
        rows.append(",".join(vals))
    with open(path, "w", newline="") as fh:
        fh.write("\r\n".join(rows) + "\r\n")


def run_summary(log: TrajectoryLog) -> dict:
    """JSON-ready run summary."""
    return {
        "eta": log.eta,
        "model": log.model_id,
        "num_steps": log.num_steps,
        "seed": log.seed,
        "final_loss": float(log.losses[-1]),
        "diverged": log.diverged,
        "divergence_step": log.divergence_step,
    }
