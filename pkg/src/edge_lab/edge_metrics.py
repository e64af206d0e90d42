"""Single-trajectory curvature diagnostics along each step segment.

Two segment-averaged curvatures are tracked per step: the uniform
average (which governs the step-increment propagator) and the
triangularly weighted "effective" curvature (which governs the one-step
loss change). Each is computable by two independent routes: exactly
from logged gradients/losses, or by weighted quadrature of the
directional curvature profile. The quadrature route makes the
telescoping balance identity a genuine test instead of a tautology.

Curvature values carry inverse-step-size units (they are compared
against the threshold 2/eta).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .loss_models import LossModel
from .numerics import (QuadratureRule, brent_root, dense_eigh, lambda_max_iter,
                       triangular_rule, uniform_rule)
from .trajectory import StochasticTrajectoryLog, TrajectoryLog

__all__ = [
    "DEGENERATE_STEP",
    "CurvatureSample",
    "LocalizationRecord",
    "EdgeBalanceReport",
    "SgdBalanceReport",
    "step_mean_curvature_exact",
    "effective_curvature_from_loss",
    "step_mean_curvature_quadrature",
    "effective_curvature_quadrature",
    "q_profile",
    "localize",
    "localized_sharpness",
    "edge_balance_report",
    "near_periodicity_bound",
    "return_ratio",
    "loss_change_proxy",
    "descent_classifier",
    "sgd_balance_report",
    "eos_onset",
    "write_metrics_csv",
]

Array = NDArray[np.float64]

# Steps shorter than this are degenerate: the unit direction (and any
# curvature along it) is numerically meaningless.
DEGENERATE_STEP = 1e-14


class DegenerateStepError(ValueError):
    """Step increment too short to define a direction."""


@dataclass(frozen=True)
class CurvatureSample:
    """One step's segment curvatures with the route that produced them."""

    k: int
    rbar: float
    rtilde: float
    route: str            # "exact-algebraic" or "quadrature"
    step_norm_sq: float


@dataclass(frozen=True)
class LocalizationRecord:
    """Interior point where a segment-averaged curvature is attained."""

    k: int
    which: str            # "tilde" or "bar"
    point: float          # xi (tilde) or zeta (bar), in (0, 1)
    target: float
    q_at_point: float
    constant_profile: bool


def _step(log: TrajectoryLog, k: int) -> tuple[Array, float]:
    if not 0 <= k < log.num_steps:
        raise IndexError(f"step {k} outside 0..{log.num_steps - 1}")
    d = log.steps[k]
    nd = float(np.linalg.norm(d))
    if nd < DEGENERATE_STEP:
        raise DegenerateStepError(f"step {k} has norm {nd:.3e} < {DEGENERATE_STEP}")
    return d, nd


def step_mean_curvature_exact(log: TrajectoryLog, k: int) -> float:
    """Uniform segment-average curvature from the logged gradient difference.

    d^T (grad_{k+1} - grad_k) / ||d||^2; exact by the fundamental theorem
    of calculus, no quadrature involved.
    """
    d, nd = _step(log, k)
    return float(d @ (log.grads[k + 1] - log.grads[k])) / nd ** 2


def effective_curvature_from_loss(log: TrajectoryLog, k: int) -> float:
    """Triangularly weighted segment curvature recovered from logged losses.

    Rearranges the one-step loss change
    L_{k+1} - L_k = -||d||^2/eta + (1/2) d^T Htilde d.
    """
    d, nd = _step(log, k)
    dloss = float(log.losses[k + 1] - log.losses[k])
    return 2.0 * (dloss + nd ** 2 / log.eta) / nd ** 2


def q_profile(model: LossModel, w: Array, d: Array, tau: float) -> float:
    """Directional curvature u^T H(w + tau d) u along the step direction."""
    nd = float(np.linalg.norm(d))
    if nd < DEGENERATE_STEP:
        raise DegenerateStepError("degenerate step in q_profile")
    u = d / nd
    return model.directional_curvature(w + tau * d, u)


def _weighted_q(model, w, d, kind: str, rule: QuadratureRule | None) -> float:
    nd = float(np.linalg.norm(d))
    u = d / nd
    f = lambda tau: model.directional_curvature(w + tau * d, u)
    if kind == "uniform":
        rule = rule if rule is not None else uniform_rule()
        return float(np.dot(rule.weights, [f(t) for t in rule.nodes]))
    rule = rule if rule is not None else triangular_rule()
    return float(np.dot(rule.weights, [f(t) for t in rule.nodes]))


def _adaptive_weighted_q(model, w, d, kind: str, rtol: float) -> float:
    make = uniform_rule if kind == "uniform" else triangular_rule
    prev = _weighted_q(model, w, d, kind, make(4))
    for order in (8, 16, 32, 64):
        cur = _weighted_q(model, w, d, kind, make(order))
        if abs(cur - prev) <= rtol * max(1.0, abs(cur)):
            return cur
        prev = cur
    return prev


def step_mean_curvature_quadrature(model: LossModel, log: TrajectoryLog, k: int,
                                   rule: QuadratureRule | None = None,
                                   adaptive: bool = False,
                                   rtol: float = 1e-9) -> float:
    """Uniform-weight quadrature of the curvature profile along step k."""
    d, _ = _step(log, k)
    w = log.w(k)
    if adaptive:
        return _adaptive_weighted_q(model, w, d, "uniform", rtol)
    return _weighted_q(model, w, d, "uniform", rule)


def effective_curvature_quadrature(model: LossModel, log: TrajectoryLog, k: int,
                                   rule: QuadratureRule | None = None,
                                   adaptive: bool = False,
                                   rtol: float = 1e-9) -> float:
    """Triangular-weight quadrature of the curvature profile along step k."""
    d, _ = _step(log, k)
    w = log.w(k)
    if adaptive:
        return _adaptive_weighted_q(model, w, d, "triangular", rtol)
    return _weighted_q(model, w, d, "triangular", rule)


def curvature_sample(model: LossModel, log: TrajectoryLog, k: int,
                     route: str = "quadrature",
                     rule_bar: QuadratureRule | None = None,
                     rule_tilde: QuadratureRule | None = None,
                     adaptive: bool = False) -> CurvatureSample:
    d, nd = _step(log, k)
    if route == "exact-algebraic":
        rbar = step_mean_curvature_exact(log, k)
        rtilde = effective_curvature_from_loss(log, k)
    elif route == "quadrature":
        rbar = step_mean_curvature_quadrature(model, log, k, rule_bar, adaptive)
        rtilde = effective_curvature_quadrature(model, log, k, rule_tilde, adaptive)
    else:
        raise ValueError("route must be 'exact-algebraic' or 'quadrature'")
    return CurvatureSample(k, rbar, rtilde, route, nd ** 2)


def localize(model: LossModel, log: TrajectoryLog, k: int, which: str = "tilde",
             tol: float = 1e-10, grid: int = 64) -> LocalizationRecord:
    """Interior point where the segment-averaged curvature is attained.

    Scans a uniform grid for a sign change of q(tau) - target and
    refines with Brent's method; a profile that is constant within
    ``tol`` across the grid returns the conventional midpoint 0.5. The
    grid is refined up to 1024 cells before failing.
    """
    if which not in ("tilde", "bar"):
        raise ValueError("which must be 'tilde' or 'bar'")
    d, _ = _step(log, k)
    w = log.w(k)
    if which == "tilde":
        target = effective_curvature_quadrature(model, log, k)
    else:
        target = step_mean_curvature_quadrature(model, log, k)

    cells = int(grid)
    while cells <= 1024:
        taus = np.linspace(0.0, 1.0, cells + 1)
        qs = np.array([q_profile(model, w, d, t) for t in taus])
        if float(qs.max() - qs.min()) <= tol:
            return LocalizationRecord(k, which, 0.5, target, q_profile(model, w, d, 0.5), True)
        g = qs - target
        hit = np.nonzero(g == 0.0)[0]
        if hit.size and 0.0 < taus[hit[0]] < 1.0:
            t0 = float(taus[hit[0]])
            return LocalizationRecord(k, which, t0, target, q_profile(model, w, d, t0), False)
        sign_change = np.nonzero(g[:-1] * g[1:] < 0.0)[0]
        if sign_change.size:
            i = int(sign_change[0])
            root = brent_root(lambda t: q_profile(model, w, d, t) - target,
                              float(taus[i]), float(taus[i + 1]), tol=1e-14)
            root = min(max(root, np.nextafter(0.0, 1.0)), np.nextafter(1.0, 0.0))
            return LocalizationRecord(k, which, root, target,
                                      q_profile(model, w, d, root), False)
        cells *= 2
    raise RuntimeError(
        f"no interior point found for step {k} ({which}) at grid 1024; "
        "profile is neither constant nor crossing the target")


def localized_sharpness(model: LossModel, log: TrajectoryLog,
                        rec: LocalizationRecord, tol: float = 1e-9,
                        seed: int = 0) -> float:
    """Largest Hessian eigenvalue at the localized interior point.

    Dense eigendecomposition for small models, otherwise Lanczos seeded
    with the step direction (so the estimate is at least the directional
    curvature there).
    """
    d = log.steps[rec.k]
    w_pt = log.w(rec.k) + rec.point * d
    if model.dim <= 64:
        evals, _ = dense_eigh(model.hessian_dense(w_pt))
        return float(evals[-1])
    u = d / float(np.linalg.norm(d))
    return lambda_max_iter(lambda v: model.hvp(w_pt, v), model.dim,
                           tol=tol, seed=seed, v0=u)


@dataclass(frozen=True)
class WindowMass:
    """Step-weight mass below/above a window around 2/eta."""

    delta: float
    sub_mass: float
    super_mass: float
    in_window_fraction: float
    sub_bound: float
    super_bound: float


@dataclass
class EdgeBalanceReport:
    """Aggregates of the telescoping curvature balance over a run."""

    eta: float
    K: int
    route: str
    E_K: float
    loss_drop: float              # L(w_0) - L(w_K)
    identity_residual: float      # |sum w_k (2/eta - rtilde_k) - 2 loss_drop|
    weighted_mean: float          # sum w_k rtilde_k / E_K
    forcing_bound: float          # 2/eta - 2 (L_0 - L_inf) / E_K, nan if L_inf unknown
    max_rtilde: float
    B_minus: float
    B_plus: float
    windows: dict[float, WindowMass]
    rtildes: Array = field(repr=False)
    weights: Array = field(repr=False)
    skipped_steps: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "eta": self.eta, "K": self.K, "route": self.route,
            "E_K": self.E_K, "loss_drop": self.loss_drop,
            "identity_residual": self.identity_residual,
            "weighted_mean": self.weighted_mean,
            "forcing_bound": self.forcing_bound,
            "max_rtilde": self.max_rtilde,
            "B_minus": self.B_minus, "B_plus": self.B_plus,
            "windows": {
                f"{d:.17g}": {
                    "sub_mass": wm.sub_mass, "super_mass": wm.super_mass,
                    "in_window_fraction": wm.in_window_fraction,
                    "sub_bound": wm.sub_bound, "super_bound": wm.super_bound,
                } for d, wm in self.windows.items()},
            "skipped_steps": self.skipped_steps,
        }


def edge_balance_report(model: LossModel, log: TrajectoryLog,
                        route: str = "quadrature",
                        deltas=None,
                        rule: QuadratureRule | None = None,
                        adaptive: bool = False) -> EdgeBalanceReport:
    """Telescoping balance, signed decomposition and window masses.

    Steps with degenerate increments are skipped; their contribution to
    every weighted sum is below the rounding floor by construction.
    """
    eta = log.eta
    thr = 2.0 / eta
    if deltas is None:
        deltas = [0.05 * thr, 0.1 * thr, 0.5 * thr]

    rtildes, weights, skipped = [], [], []
    for k in range(log.num_steps):
        nd = float(np.linalg.norm(log.steps[k]))
        if nd < DEGENERATE_STEP:
            skipped.append(k)
            continue
        if route == "quadrature":
            rt = effective_curvature_quadrature(model, log, k, rule, adaptive)
        elif route == "loss":
            rt = effective_curvature_from_loss(log, k)
        else:
            raise ValueError("route must be 'quadrature' or 'loss'")
        rtildes.append(rt)
        weights.append(nd ** 2)
    rtildes = np.array(rtildes)
    weights = np.array(weights)

    E_K = float(weights.sum())
    loss_drop = float(log.losses[0] - log.losses[-1])
    lhs = float(np.sum(weights * (thr - rtildes)))
    identity_residual = abs(lhs - 2.0 * loss_drop)
    weighted_mean = float(np.sum(weights * rtildes) / E_K) if E_K > 0 else float("nan")

    if model.inf_value is not None and E_K > 0:
        forcing = thr - 2.0 * (float(log.losses[0]) - model.inf_value) / E_K
    else:
        forcing = float("nan")

    dev = thr - rtildes
    B_minus = float(np.sum(weights * np.clip(dev, 0.0, None)))
    B_plus = float(np.sum(weights * np.clip(-dev, 0.0, None)))

    gap = 2.0 * (float(log.losses[0]) - (model.inf_value if model.inf_value is not None
                                         else float(log.losses[-1])))
    windows = {}
    for delta in deltas:
        sub = float(np.sum(weights[rtildes <= thr - delta]))
        sup = float(np.sum(weights[rtildes >= thr + delta]))
        inw = float(np.sum(weights[np.abs(rtildes - thr) < delta]) / E_K) if E_K > 0 else 0.0
        windows[float(delta)] = WindowMass(
            delta=float(delta), sub_mass=sub, super_mass=sup,
            in_window_fraction=inw,
            sub_bound=(gap + B_plus) / delta, super_bound=B_plus / delta)

    return EdgeBalanceReport(
        eta=eta, K=log.num_steps, route=route, E_K=E_K, loss_drop=loss_drop,
        identity_residual=identity_residual, weighted_mean=weighted_mean,
        forcing_bound=forcing, max_rtilde=float(rtildes.max()) if rtildes.size else float("nan"),
        B_minus=B_minus, B_plus=B_plus, windows=windows,
        rtildes=rtildes, weights=weights, skipped_steps=skipped)


def near_periodicity_bound(log: TrajectoryLog, k: int) -> tuple[float, float]:
    """(|rbar_k - 2/eta|, ||w_{k+2} - w_k|| / (eta ||d_k||)).

    The left side never exceeds the right: near two-step return forces
    the segment curvature to the threshold.
    """
    if k + 1 >= log.num_steps:
        raise IndexError("near_periodicity_bound needs records k..k+2")
    d, nd = _step(log, k)
    lhs = abs(step_mean_curvature_exact(log, k) - 2.0 / log.eta)
    two_step = log.steps[k] + log.steps[k + 1]
    rhs = float(np.linalg.norm(two_step)) / (log.eta * nd)
    return lhs, rhs


def return_ratio(log: TrajectoryLog, k: int) -> float:
    """Two-step return ratio ||w_{k+2} - w_k|| / ||d_k||."""
    d, nd = _step(log, k)
    return float(np.linalg.norm(log.steps[k] + log.steps[k + 1])) / nd


def loss_change_proxy(log: TrajectoryLog, k: int) -> tuple[float, float]:
    """Trajectory-only loss-change proxy and the actual change.

    Proxy: -(1/2 eta) d_k . (w_{k+2} - w_k). Exact on quadratics.
    """
    if k + 1 >= log.num_steps:
        raise IndexError("loss_change_proxy needs records k..k+2")
    d = log.steps[k]
    two_step = log.steps[k] + log.steps[k + 1]
    proxy = -float(d @ two_step) / (2.0 * log.eta)
    actual = float(log.losses[k + 1] - log.losses[k])
    return proxy, actual


def descent_classifier(rtilde: float, eta: float, step_norm_sq: float,
                       tol: float = 1e-14) -> str:
    """Classify a step as descent / ascent / stationary from its curvature.

    The implied loss change is -||d||^2 (2 - eta*rtilde) / (2 eta);
    magnitudes at or below ``tol`` count as stationary.
    """
    implied = -step_norm_sq * (2.0 - eta * rtilde) / (2.0 * eta)
    if abs(implied) <= tol:
        return "stationary"
    return "descent" if implied < 0 else "ascent"


def eos_onset(rtildes: Array, eta: float) -> int | None:
    """First step index whose effective curvature reaches 95% of 2/eta."""
    thr = 0.95 * 2.0 / eta
    hits = np.nonzero(np.asarray(rtildes) >= thr)[0]
    return int(hits[0]) if hits.size else None


@dataclass
class SgdBalanceReport:
    """Both sides of the noisy telescoping balance plus the forced propagator."""

    eta: float
    K: int
    route: str
    lhs: float                    # sum ||s_k||^2 (2/eta - rtilde_k)
    loss_term: float              # 2 (L_0 - L_K)
    cross_term: float             # 2 eta sum <grad_k, eps_k>
    noise_term: float             # 2 eta sum ||eps_k||^2
    residual: float
    max_propagator_residual: float

    @property
    def rhs(self) -> float:
        return self.loss_term + self.cross_term + self.noise_term


def sgd_balance_report(model: LossModel, log: StochasticTrajectoryLog,
                       route: str = "quadrature",
                       rule: QuadratureRule | None = None,
                       adaptive: bool = False) -> SgdBalanceReport:
    """Noisy balance identity and per-step forced-propagator residual.

    The propagator residual applies the uniform segment Hessian to the
    stochastic step by vector quadrature, so it is an independent check
    rather than a restatement of the update rule.
    """
    if log.noise.shape[0] != log.num_steps:
        raise ValueError("stochastic log is missing noise records")
    eta = log.eta
    thr = 2.0 / eta
    u_rule = rule if (rule is not None and rule.kind == "uniform") else uniform_rule()

    lhs = 0.0
    cross = 0.0
    noise_sq = 0.0
    max_prop = 0.0
    for k in range(log.num_steps):
        s = log.steps[k]
        ns = float(np.linalg.norm(s))
        eps = log.noise[k]
        g = log.grads[k]
        cross += float(g @ eps)
        noise_sq += float(eps @ eps)
        if ns < DEGENERATE_STEP:
            continue
        if route == "quadrature":
            rt = effective_curvature_quadrature(model, log, k, None, adaptive)
        else:
            dloss = float(log.losses[k + 1] - log.losses[k])
            rt = 2.0 * (dloss + ns ** 2 / eta
                        - eta * float(g @ eps) - eta * float(eps @ eps)) / ns ** 2
        lhs += ns ** 2 * (thr - rt)

        if k + 1 < log.num_steps:
            w = log.w(k)
            hbar_s = np.zeros_like(s)
            for wq, tau in zip(u_rule.weights, u_rule.nodes):
                hbar_s = hbar_s + wq * model.hvp(w + tau * s, s)
            resid = log.steps[k + 1] - (s - eta * hbar_s) \
                + eta * (log.noise[k + 1] - eps)
            max_prop = max(max_prop, float(np.linalg.norm(resid)))

    loss_term = 2.0 * float(log.losses[0] - log.losses[-1])
    cross_term = 2.0 * eta * cross
    noise_term = 2.0 * eta * noise_sq
    residual = abs(lhs - (loss_term + cross_term + noise_term))
    return SgdBalanceReport(eta=eta, K=log.num_steps, route=route, lhs=lhs,
                            loss_term=loss_term, cross_term=cross_term,
                            noise_term=noise_term, residual=residual,
                            max_propagator_residual=max_prop)


def write_metrics_csv(model: LossModel, log: TrajectoryLog, path,
                      route: str = "quadrature", with_localization: bool = True,
                      adaptive: bool = False) -> None:
    """Per-step metrics table.

    Columns: k, step_norm_sq, rbar, rtilde, xi, zeta, lambda_max_xi,
    delta_L, proxy, return_ratio. Fields that need records beyond the
    end of the run (or a localized point when localization is off) are
    left empty.
    """
    def fmt(x):
        return "" if x is None else f"{x:.17g}"

    rows = ["k,step_norm_sq,rbar,rtilde,xi,zeta,lambda_max_xi,delta_L,proxy,return_ratio"]
    for k in range(log.num_steps):
        nd = float(np.linalg.norm(log.steps[k]))
        if nd < DEGENERATE_STEP:
            rows.append(f"{k},{nd * nd:.17g},,,,,,,,")
            continue
        sample = curvature_sample(model, log, k, route=route, adaptive=adaptive)
        xi = zeta = lam_xi = None
        if with_localization:
            rec_t = localize(model, log, k, "tilde")
            rec_b = localize(model, log, k, "bar")
            xi, zeta = rec_t.point, rec_b.point
            lam_xi = localized_sharpness(model, log, rec_t)
        delta_l = float(log.losses[k + 1] - log.losses[k])
        proxy = ratio = None
        if k + 1 < log.num_steps:
            proxy, _ = loss_change_proxy(log, k)
            ratio = return_ratio(log, k)
        rows.append(",".join([
            str(k), f"{sample.step_norm_sq:.17g}", f"{sample.rbar:.17g}",
            f"{sample.rtilde:.17g}", fmt(xi), fmt(zeta), fmt(lam_xi),
            f"{delta_l:.17g}", fmt(proxy), fmt(ratio)]))
    with open(path, "w", newline="") as fh:
        fh.write("\r\n".join(rows) + "\r\n")
