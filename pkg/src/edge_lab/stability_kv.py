"""Stability mechanisms and the discrete two-trajectory strain framework.

Covers the step-recoil identity above the threshold, the oscillatory
cancellation bound inside the stability window, the excursion measure
of a step matrix beyond [0, 2/eta], ordered propagator products with
their exponential norm bound, and the strain/stress recurrence for a
pair of runs on two objectives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .edge_metrics import DEGENERATE_STEP, step_mean_curvature_exact
from .loss_models import LossModel
from .numerics import QuadratureRule, dense_eigh, uniform_rule
from .trajectory import PairedLog, TrajectoryLog

__all__ = [
    "StrainLog",
    "recoil_check",
    "oscillatory_bound",
    "excursion_kappa",
    "propagator_product",
    "propagator_norm",
    "strain_run",
    "strain_via_propagator",
    "strain_bound_rhs",
    "supercritical_run_lengths",
    "write_strain_csv",
]

Array = NDArray[np.float64]


def recoil_check(log: TrajectoryLog, k: int) -> tuple[float, float, float]:
    """(inner, predicted, growth) for consecutive steps k, k+1.

    inner = <d_{k+1}, d_k>, predicted = (1 - eta*rbar_k) ||d_k||^2 with
    the exact gradient-difference curvature, growth = ||d_{k+1}||/||d_k||.
    The two first entries agree identically; above the threshold the
    growth factor is at least 1 + eta*(rbar - 2/eta).
    """
    if k + 1 >= log.num_steps:
        raise IndexError("recoil_check needs steps k and k+1")
    d0, d1 = log.steps[k], log.steps[k + 1]
    nd0 = float(np.linalg.norm(d0))
    if nd0 < DEGENERATE_STEP:
        raise ValueError(f"degenerate step {k}")
    rbar = step_mean_curvature_exact(log, k)
    inner = float(d1 @ d0)
    predicted = (1.0 - log.eta * rbar) * nd0 ** 2
    growth = float(np.linalg.norm(d1)) / nd0
    return inner, predicted, growth


def oscillatory_bound(m_seq, u_seq, eta: float) -> tuple[float, float]:
    """Simulate x_{k+1} = m_k x_k - eta u_k from x_0 = 0 and its bound.

    Requires every multiplier in [-1, 0]. Returns (|x_T|, bound) with
    bound = eta (|u_{T-1}| + sum |u_{k+1} - u_k|): the final forcing
    value plus the total variation, so alternation cancels rather than
    accumulates.
    """
    m = np.asarray(m_seq, dtype=float)
    u = np.asarray(u_seq, dtype=float)
    if m.shape != u.shape or m.ndim != 1 or m.size < 1:
        raise ValueError("m_seq and u_seq must be 1-d of equal length >= 1")
    if np.any(m < -1.0) or np.any(m > 0.0):
        raise ValueError("multipliers must lie in [-1, 0]")
    x = 0.0
    for mk, uk in zip(m, u):
        x = mk * x - eta * uk
    bound = eta * (abs(u[-1]) + float(np.sum(np.abs(np.diff(u)))))
    return abs(x), bound


def excursion_kappa(A: Array, eta: float) -> float:
    """Distance of the spectrum of A outside the stability window [0, 2/eta].

    kappa = max{0, eta*lambda_max - 2, -eta*lambda_min}; zero exactly
    when the one-step map I - eta*A is a contraction.
    """
    evals, _ = dense_eigh(np.asarray(A, dtype=float))
    return max(0.0, eta * float(evals[-1]) - 2.0, -eta * float(evals[0]))


@dataclass
class StrainLog:
    """Per-step records of the two-trajectory strain recurrence.

    delta[k] = w_k - w'_k is the logged strain, stress[k] the gradient
    mismatch at the reference trajectory, A[k] the segment-averaged
    Hessian of the first objective, and residual[k] the recurrence
    mismatch ||delta_{k+1} - (I - eta A_k) delta_k + eta f_k||.
    """

    eta: float
    delta: Array                  # (K+1, dim)
    stress: Array                 # (K, dim)
    A: list[Array]                # K dense matrices
    kappa: Array                  # (K,)
    residual: Array               # (K,)

    @property
    def num_steps(self) -> int:
        return self.stress.shape[0]


def _segment_hessian(model: LossModel, base: Array, delta: Array,
                     rule: QuadratureRule) -> Array:
    dim = model.dim
    A = np.zeros((dim, dim))
    for w, tau in zip(rule.weights, rule.nodes):
        A += w * model.hessian_dense(base + tau * delta)
    return (A + A.T) / 2.0


def strain_run(pair: PairedLog, model_s: LossModel,
               rule: QuadratureRule | None = None,
               adaptive: bool = False, adapt_tol: float = 1e-10) -> StrainLog:
    """Assemble the strain/stress/step-matrix log of a paired run.

    A_k is the uniform quadrature of the first objective's Hessian along
    the segment from w'_k to w_k. With ``adaptive`` the order doubles
    until A_k stabilizes (for non-polynomial objectives).
    """
    if rule is None:
        rule = uniform_rule()
    if rule.kind != "uniform":
        raise ValueError("segment Hessians use the uniform rule")
    K = pair.num_steps
    eta = pair.log_s.eta
    dim = pair.log_s.dim

    delta = np.array([pair.log_s.w(k) - pair.log_sp.w(k) for k in range(K + 1)])
    stress = np.zeros((K, dim))
    A_list: list[Array] = []
    kappa = np.zeros(K)
    residual = np.zeros(K)
    for k in range(K):
        wp = pair.log_sp.w(k)
        stress[k] = model_s.gradient(wp) - pair.log_sp.grads[k]
        A = _segment_hessian(model_s, wp, delta[k], rule)
        if adaptive:
            order = rule.order
            while order < 64:
                order *= 2
                A2 = _segment_hessian(model_s, wp, delta[k], uniform_rule(order))
                if float(np.max(np.abs(A2 - A))) <= adapt_tol * max(1.0, float(np.max(np.abs(A2)))):
                    A = A2
                    break
                A = A2
        A_list.append(A)
        kappa[k] = excursion_kappa(A, eta)
        predicted = delta[k] - eta * (A @ delta[k]) - eta * stress[k]
        residual[k] = float(np.linalg.norm(delta[k + 1] - predicted))
    return StrainLog(eta=eta, delta=delta, stress=stress, A=A_list,
                     kappa=kappa, residual=residual)


def propagator_product(strain: StrainLog, k: int, s: int) -> Array:
    """Ordered product (I - eta A_{k-1}) ... (I - eta A_s); identity at k = s."""
    if not 0 <= s <= k <= strain.num_steps:
        raise IndexError(f"need 0 <= s <= k <= {strain.num_steps}")
    dim = strain.delta.shape[1]
    T = np.eye(dim)
    for r in range(s, k):
        T = (np.eye(dim) - strain.eta * strain.A[r]) @ T
    return T


def propagator_norm(T: Array) -> float:
    """Operator norm via the dense spectrum of T^T T."""
    evals, _ = dense_eigh(T.T @ T)
    return math.sqrt(max(float(evals[-1]), 0.0))


def strain_via_propagator(strain: StrainLog, k: int) -> Array:
    """Variation-of-constants value -eta sum_{s<k} T[k, s+1] f_s."""
    if not 0 <= k <= strain.num_steps:
        raise IndexError(f"step {k} outside the strain log")
    dim = strain.delta.shape[1]
    acc = np.zeros(dim)
    # Build right-to-left so each partial product is reused.
    T = np.eye(dim)
    for s in range(k - 1, -1, -1):
        # T currently equals T[k, s+1].
        acc = acc + T @ strain.stress[s]
        T = T @ (np.eye(dim) - strain.eta * strain.A[s])
    return -strain.eta * acc


def strain_bound_rhs(strain: StrainLog, k: int) -> float:
    """Exponential-excursion bound eta sum_s exp(sum_{r>s} kappa_r) ||f_s||."""
    total = 0.0
    for s in range(k):
        tail = float(np.sum(strain.kappa[s + 1:k]))
        total += math.exp(tail) * float(np.linalg.norm(strain.stress[s]))
    return strain.eta * total


def supercritical_run_lengths(log: TrajectoryLog) -> list[tuple[int, int, int]]:
    """Maximal above-threshold runs with their geometric-growth length caps.

    Returns (start, length, cap) per maximal run of steps with
    rbar_k > 2/eta; cap is ceil(log(dmax/dmin) / log(1 + eta*delta))
    for the run's smallest threshold excess delta. On a bounded run the
    observed length can never exceed the cap.
    """
    thr = 2.0 / log.eta
    norms = np.linalg.norm(log.steps, axis=1)
    usable = norms >= DEGENERATE_STEP
    if not np.any(usable):
        return []
    dmax, dmin = float(norms[usable].max()), float(norms[usable].min())
    out = []
    k = 0
    K = log.num_steps
    while k < K:
        if usable[k] and step_mean_curvature_exact(log, k) > thr:
            start = k
            excess = []
            while k < K and usable[k]:
                e = step_mean_curvature_exact(log, k) - thr
                if e <= 0:
                    break
                excess.append(e)
                k += 1
            delta = min(excess)
            cap = math.ceil(math.log(dmax / dmin) / math.log1p(log.eta * delta)) \
                if delta > 0 and dmax > dmin else len(excess)
            out.append((start, len(excess), max(cap, 1)))
        else:
            k += 1
    return out


def write_strain_csv(strain: StrainLog, path) -> None:
    """Columns k, strain_norm, stress_norm, kappa, recurrence_residual, bound_rhs."""
    rows = ["k,strain_norm,stress_norm,kappa,recurrence_residual,bound_rhs"]
    for k in range(strain.num_steps):
        rows.append(",".join([
            str(k),
            f"{np.linalg.norm(strain.delta[k]):.17g}",
            f"{np.linalg.norm(strain.stress[k]):.17g}",
            f"{strain.kappa[k]:.17g}",
            f"{strain.residual[k]:.17g}",
            f"{strain_bound_rhs(strain, k):.17g}",
        ]))
    with open(path, "w", newline="") as fh:
        fh.write("\r\n".join(rows) + "\r\n")
