"""Fixed points and period-two orbits of the gradient-descent map.

The machinery runs on a model restricted to an affine slice through a
critical point (the normal space of the minimum manifold for
overparametrized models, the full space otherwise): critical-point
refinement, the symmetric center solve, the learning-rate-independent
orbit profile and its nonlinear eigenproblem, the quartic branching
coefficient, the critical step size, branch prediction, and continuation
or empirical sweeps across a step-size grid. Every accepted orbit is
re-verified against the raw two-step dynamics in the full space.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .loss_models import LossModel
from .numerics import (NonConvergenceError, SingularJacobianError, fd_step,
                       newton_solve)
from .trajectory import run_gd

__all__ = [
    "EdgeCoupling",
    "CenterSolve",
    "BranchPoint",
    "EmpiricalPoint",
    "find_critical_point",
    "center_solve",
    "edge_profile",
    "period_two_solve",
    "quartic_coefficient",
    "critical_eta",
    "branch_predict",
    "branch_sweep",
    "edge_coupling_hessian",
    "fit_scaling_exponent",
]

Array = NDArray[np.float64]

TRIVIAL_AMPLITUDE = 1e-7
RAW_ORBIT_TOL = 1e-8
KERNEL_THRESHOLD = 1e-8


@dataclass(frozen=True)
class EdgeCoupling:
    """Coupling functional on consecutive iterate pairs.

    value(x, y) = L(x) + L(y) - ||x - y||^2 / (2 eta); its partial
    criticality in x encodes one gradient step. In centered coordinates
    (m - a, m + a) it equals twice ``reduced(m, a)``.
    """

    eta: float
    model: LossModel

    def value(self, x: Array, y: Array) -> float:
        diff = np.asarray(x, float) - np.asarray(y, float)
        return (self.model.value(x) + self.model.value(y)
                - float(diff @ diff) / (2.0 * self.eta))

    def reduced(self, m: Array, a: Array) -> float:
        a = np.asarray(a, float)
        return (0.5 * (self.model.value(m + a) + self.model.value(m - a))
                - float(a @ a) / self.eta)


class _Slice:
    """Model restricted to an affine slice w_bar + span(S)."""

    def __init__(self, model: LossModel, w_bar: Array, S: Array | None):
        self.model = model
        self.w_bar = np.asarray(w_bar, dtype=float)
        if S is None:
            self.S = None
            self.n = model.dim
        else:
            S = np.asarray(S, dtype=float)
            if S.ndim != 2 or S.shape[0] != model.dim:
                raise ValueError("subspace basis must be dim x n_sub")
            gram = S.T @ S
            if float(np.max(np.abs(gram - np.eye(S.shape[1])))) > 1e-10:
                raise ValueError("subspace basis must be orthonormal")
            self.S = S
            self.n = S.shape[1]

    def to_full(self, z: Array) -> Array:
        z = np.atleast_1d(np.asarray(z, float))
        return self.w_bar + (z if self.S is None else self.S @ z)

    def dir_to_full(self, z: Array) -> Array:
        z = np.atleast_1d(np.asarray(z, float))
        return z if self.S is None else self.S @ z

    def to_reduced(self, v_full: Array, is_direction: bool = True) -> Array:
        v = np.asarray(v_full, float)
        if not is_direction:
            v = v - self.w_bar
        return v if self.S is None else self.S.T @ v

    def value(self, z: Array) -> float:
        return self.model.value(self.to_full(z))

    def gradient(self, z: Array) -> Array:
        g = self.model.gradient(self.to_full(z))
        return g if self.S is None else self.S.T @ g

    def hessian(self, z: Array) -> Array:
        H = self.model.hessian_dense(self.to_full(z))
        return H if self.S is None else self.S.T @ H @ self.S


def _pinv_solve(H: Array, g: Array, threshold: float = KERNEL_THRESHOLD) -> Array:
    """Solve H x = g on the complement of the near-kernel of symmetric H."""
    evals, vecs = np.linalg.eigh((H + H.T) / 2.0)
    cut = threshold * float(np.max(np.abs(evals))) if evals.size else 0.0
    inv = np.where(np.abs(evals) > cut, 1.0 / np.where(evals == 0, 1.0, evals), 0.0)
    return vecs @ (inv * (vecs.T @ g))


def find_critical_point(model: LossModel, w0: Array, tol: float = 1e-12,
                        max_iter: int = 100) -> Array:
    """Newton refinement of a nearby critical point of the loss.

    Rank-deficient Hessians (minimum manifolds) are handled by
    restricting each Newton step to the complement of the near-kernel.
    """
    x = np.atleast_1d(np.asarray(w0, dtype=float)).copy()
    history = []
    for _ in range(max_iter):
        g = model.gradient(x)
        res = float(np.linalg.norm(g))
        history.append(res)
        if res <= tol:
            return x
        H = model.hessian_dense(x)
        x = x - _pinv_solve(H, g)
    g = model.gradient(x)
    res = float(np.linalg.norm(g))
    if res <= tol:
        return x
    raise NonConvergenceError(
        f"critical-point search stalled at residual {res:g}", history + [res])


@dataclass
class CenterSolve:
    """Solution of the symmetric center balance for a half-amplitude a.

    The center m satisfies (the slice projection of)
    grad L(m + a) + grad L(m - a) = 0. When the requested amplitude was
    outside the solvable neighborhood, ``halvings`` records how many
    times it was halved; ``a`` is the amplitude actually reached.
    """

    w_bar: Array
    a: Array
    m: Array
    residual: float
    halvings: int = 0


def _center_newton(sl: _Slice, a_full: Array, tol: float, max_iter: int = 60) -> tuple[Array, float]:
    a_red = sl.to_reduced(a_full)

    def F(z):
        m = sl.to_full(z)
        g = 0.5 * (sl.model.gradient(m + a_full) + sl.model.gradient(m - a_full))
        return g if sl.S is None else sl.S.T @ g

    def J(z):
        m = sl.to_full(z)
        H = 0.5 * (sl.model.hessian_dense(m + a_full)
                   + sl.model.hessian_dense(m - a_full))
        return H if sl.S is None else sl.S.T @ H @ sl.S

    z = newton_solve(F, J, np.zeros(sl.n), tol=tol, max_iter=max_iter)
    return z, float(np.linalg.norm(F(z)))


def center_solve(model: LossModel, w_bar: Array, a: Array, tol: float = 1e-12,
                 subspace: Array | None = None) -> CenterSolve:
    """Solve the center-balance equation at half-amplitude ``a``.

    Halves the amplitude and retries (up to 5 times) when Newton fails,
    reporting the amplitude actually reached.
    """
    sl = _Slice(model, w_bar, subspace)
    a_full = np.atleast_1d(np.asarray(a, dtype=float)).copy()
    halvings = 0
    while True:
        try:
            z, res = _center_newton(sl, a_full, tol)
            m = sl.to_full(z)
            return CenterSolve(w_bar=sl.w_bar, a=a_full, m=m,
                               residual=res, halvings=halvings)
        except (NonConvergenceError, SingularJacobianError):
            if halvings >= 5:
                raise
            a_full = a_full / 2.0
            halvings += 1


def edge_profile(model: LossModel, solve: CenterSolve,
                 subspace: Array | None = None) -> tuple[float, Array]:
    """Orbit profile value and gradient at the solved center.

    Profile: the symmetrized loss 0.5 (L(m + a) + L(m - a)); gradient:
    0.5 (grad L(m + a) - grad L(m - a)), projected onto the slice. The
    nonzero critical amplitudes of profile - ||a||^2/eta solve the
    nonlinear eigenproblem grad profile = (2/eta) a.
    """
    m, a = solve.m, solve.a
    value = 0.5 * (model.value(m + a) + model.value(m - a))
    grad = 0.5 * (model.gradient(m + a) - model.gradient(m - a))
    if subspace is not None:
        S = np.asarray(subspace, float)
        grad = S @ (S.T @ grad)
    return float(value), grad


@dataclass
class BranchPoint:
    """One point on the period-two branch at step size eta."""

    eta: float
    a: Array
    m: Array
    residual: float           # || grad profile(a) - (2/eta) a || on the slice
    profile_value: float
    trivial: bool
    raw_residual: float       # || GD^2(x) - x || for x = m - a, full space
    raw_ok: bool

    @property
    def amplitude(self) -> float:
        return float(np.linalg.norm(self.a))


@dataclass(frozen=True)
class EmpiricalPoint:
    """Amplitude observed by running the raw dynamics at one step size."""

    eta: float
    amplitude: float


def _raw_two_step_residual(model: LossModel, eta: float, x: Array) -> float:
    y = x - eta * model.gradient(x)
    x2 = y - eta * model.gradient(y)
    return float(np.linalg.norm(x2 - x))


def period_two_solve(model: LossModel, w_bar: Array, eta: float, a0: Array,
                     tol: float = 1e-12,
                     subspace: Array | None = None) -> BranchPoint:
    """Newton solve for a period-two orbit near w_bar at step size eta.

    Solves the two-step closure for the orbit pair on the slice and
    reports the nonlinear-eigenproblem residual of the half-amplitude.
    Convergence to the fixed point is flagged trivial, not an error.
    """
    sl = _Slice(model, w_bar, subspace)
    a_red = sl.to_reduced(np.atleast_1d(np.asarray(a0, dtype=float)))
    n = sl.n

    def F(zz):
        zx, zy = zz[:n], zz[n:]
        return np.concatenate([
            zy - zx + eta * sl.gradient(zx),
            zx - zy + eta * sl.gradient(zy),
        ])

    def J(zz):
        zx, zy = zz[:n], zz[n:]
        I = np.eye(n)
        top = np.hstack([-I + eta * sl.hessian(zx), I])
        bot = np.hstack([I, -I + eta * sl.hessian(zy)])
        return np.vstack([top, bot])

    z0 = np.concatenate([-a_red, a_red])
    zz = newton_solve(F, J, z0, tol=tol, max_iter=120)

    def amplitude_of(z):
        return float(np.linalg.norm((z[n:] - z[:n]) / 2.0))

    # At the exact threshold the orbit equation degenerates to its cubic
    # term and the residual tolerance admits small spurious amplitudes; a
    # genuine orbit is a Newton fixed point, a collapsing one keeps
    # contracting, so iterate the suspicious case down.
    amp = amplitude_of(zz)
    if TRIVIAL_AMPLITUDE <= amp < 1e-3:
        try:
            for _ in range(400):
                step = np.linalg.solve(J(zz), F(zz))
                if amplitude_of(zz - step) > 0.9 * amplitude_of(zz):
                    break
                zz = zz - step
                if amplitude_of(zz) < TRIVIAL_AMPLITUDE:
                    break
        except np.linalg.LinAlgError:
            pass

    zx, zy = zz[:n], zz[n:]
    a_full = sl.dir_to_full((zy - zx) / 2.0)
    m_full = sl.to_full((zx + zy) / 2.0)

    trivial = float(np.linalg.norm(a_full)) < TRIVIAL_AMPLITUDE
    grad_p = 0.5 * (model.gradient(m_full + a_full) - model.gradient(m_full - a_full))
    grad_p_red = sl.to_reduced(grad_p)
    resid = float(np.linalg.norm(grad_p_red - (2.0 / eta) * sl.to_reduced(a_full)))
    profile = 0.5 * (model.value(m_full + a_full) + model.value(m_full - a_full))
    raw = _raw_two_step_residual(model, eta, m_full - a_full)
    raw_ok = raw <= RAW_ORBIT_TOL * (1.0 + float(np.linalg.norm(m_full - a_full)))
    return BranchPoint(eta=float(eta), a=a_full, m=m_full, residual=resid,
                       profile_value=float(profile), trivial=trivial,
                       raw_residual=raw, raw_ok=raw_ok)


def _grad_second_diff(sl: _Slice, u_red: Array, h: float) -> Array:
    gp = sl.gradient(h * u_red)
    g0 = sl.gradient(np.zeros(sl.n))
    gm = sl.gradient(-h * u_red)
    return (gp - 2.0 * g0 + gm) / (h * h)


def _value_fourth_diff(sl: _Slice, u_red: Array, h: float) -> float:
    vals = [sl.value(t * h * u_red) for t in (-2, -1, 0, 1, 2)]
    return (vals[0] - 4 * vals[1] + 6 * vals[2] - 4 * vals[3] + vals[4]) / h ** 4


def quartic_coefficient(model: LossModel, w_bar: Array, u: Array,
                        subspace: Array | None = None,
                        h3: float | None = None,
                        h4: float | None = None) -> float:
    """Quartic branching coefficient of the orbit profile along ``u``.

    Combines the fourth directional derivative of the loss with the
    center-map correction built from the second difference of the
    gradient and the slice-restricted inverse Hessian:
    (1/6) d4 - (1/2) <d3, H^{-1} d3>. Homogeneous of degree four in u.
    Each finite-difference contraction is recomputed at half step as a
    consistency check.
    """
    sl = _Slice(model, w_bar, subspace)
    u_red = sl.to_reduced(np.atleast_1d(np.asarray(u, dtype=float)))
    if subspace is not None:
        back = sl.dir_to_full(u_red)
        if float(np.linalg.norm(back - np.asarray(u, float))) > 1e-8 * (
                1.0 + float(np.linalg.norm(u))):
            raise ValueError("direction u must lie in the given subspace")
    wnorm = float(np.linalg.norm(sl.w_bar))
    if h3 is None:
        h3 = fd_step(3, wnorm)
    if h4 is None:
        h4 = fd_step(4, wnorm)

    d3 = _grad_second_diff(sl, u_red, h3)
    d3_half = _grad_second_diff(sl, u_red, h3 / 2.0)
    d4 = _value_fourth_diff(sl, u_red, h4)
    d4_half = _value_fourth_diff(sl, u_red, h4 / 2.0)
    scale3 = max(1.0, float(np.linalg.norm(d3_half)))
    if float(np.linalg.norm(d3 - d3_half)) > 1e-3 * scale3:
        warnings.warn("third-derivative contraction is step-size sensitive; "
                      "treat the quartic coefficient with caution")
    if abs(d4 - d4_half) > 1e-3 * max(1.0, abs(d4_half)):
        warnings.warn("fourth-derivative stencil is step-size sensitive; "
                      "treat the quartic coefficient with caution")

    H = sl.hessian(np.zeros(sl.n))
    evals = np.linalg.eigvalsh(H)
    cut = KERNEL_THRESHOLD * float(np.max(np.abs(evals)))
    if float(np.min(np.abs(evals))) <= cut:
        raise SingularJacobianError(
            "restricted Hessian is singular; pass the normal-space basis of "
            "the minimum manifold as `subspace`")
    y = np.linalg.solve(H, d3_half)
    return float(d4_half / 6.0 - 0.5 * float(d3_half @ y))


def critical_eta(model: LossModel, w_bar: Array,
                 subspace: Array | None = None) -> tuple[float, Array]:
    """Critical step size 2 / lambda_max of the slice-restricted Hessian.

    Also returns the (full-space) basis of the critical eigenspace:
    eigenvectors within a relative 1e-8 window of the top eigenvalue.
    """
    sl = _Slice(model, w_bar, subspace)
    H = sl.hessian(np.zeros(sl.n))
    evals, vecs = np.linalg.eigh(H)
    lam_max = float(evals[-1])
    if lam_max <= 0.0:
        raise ValueError("no positive curvature: the period-two threshold "
                         "does not exist")
    sel = evals >= lam_max - 1e-8 * lam_max
    basis = vecs[:, sel]
    if sl.S is not None:
        basis = sl.S @ basis
    return 2.0 / lam_max, basis


def branch_predict(eta: float, eta_c: float, Q_u: float) -> tuple[bool, float]:
    """Leading-order amplitude^2 of the period-two branch at step size eta.

    amplitude^2 = (2/eta - 2/eta_c) / Q_u; the branch exists on the side
    where that quantity is positive. Degenerate (zero) quartic
    coefficients admit no prediction.
    """
    if Q_u == 0.0:
        raise ValueError("degenerate branch: quartic coefficient is zero")
    alpha_sq = (2.0 / eta - 2.0 / eta_c) / Q_u
    return alpha_sq > 0.0, alpha_sq


def branch_sweep(model: LossModel, w_bar: Array, etas, mode: str,
                 u: Array | None = None, subspace: Array | None = None,
                 tol: float = 1e-12, run_steps: int = 2000,
                 run_offset: float = 1e-3, discard_frac: float = 0.8):
    """Sweep the period-two branch over a step-size grid.

    Continuation mode solves each grid point seeded from the previous
    (the first from the quadratic branch prediction), bisecting the eta
    step once on failure before declaring the branch lost; returns
    (list of BranchPoint, lost flag). Empirical mode runs the raw
    dynamics from a small offset along ``u``, discards the leading
    ``discard_frac`` of steps and reports half the peak-to-peak
    projection onto ``u``; returns (list of EmpiricalPoint, False).
    """
    etas = [float(e) for e in etas]
    if u is None:
        _, basis = critical_eta(model, w_bar, subspace)
        if basis.shape[1] != 1:
            raise ValueError("critical eigenspace is not one-dimensional; "
                             "pass the branch direction u explicitly")
        u = basis[:, 0]
    u = np.asarray(u, dtype=float)
    u = u / float(np.linalg.norm(u))

    if mode == "empirical":
        points = []
        for eta in etas:
            log = run_gd(model, w_bar + run_offset * u, eta, run_steps)
            start = int(discard_frac * log.num_steps)
            proj = np.array([float((log.w(k) - w_bar) @ u)
                             for k in range(start, log.num_steps + 1)])
            amp = 0.5 * float(proj.max() - proj.min())
            points.append(EmpiricalPoint(eta=eta, amplitude=amp))
        return points, False

    if mode != "continuation":
        raise ValueError("mode must be 'continuation' or 'empirical'")

    eta_c, _ = critical_eta(model, w_bar, subspace)
    Q_u = quartic_coefficient(model, w_bar, u, subspace)
    points: list[BranchPoint] = []
    prev_a = None
    for eta in etas:
        if prev_a is None:
            exists, alpha_sq = branch_predict(eta, eta_c, Q_u)
            if not exists:
                return points, True
            seed = math.sqrt(alpha_sq) * u
        else:
            seed = prev_a
        try:
            bp = period_two_solve(model, w_bar, eta, seed, tol, subspace)
        except (NonConvergenceError, SingularJacobianError):
            bp = None
        if bp is None or bp.trivial:
            # One bisection of the eta step before giving up.
            if points:
                mid = 0.5 * (points[-1].eta + eta)
                try:
                    bp_mid = period_two_solve(model, w_bar, mid,
                                              points[-1].a, tol, subspace)
                    if not bp_mid.trivial:
                        bp = period_two_solve(model, w_bar, eta, bp_mid.a,
                                              tol, subspace)
                except (NonConvergenceError, SingularJacobianError):
                    bp = None
            if bp is None or bp.trivial:
                return points, True
        points.append(bp)
        prev_a = bp.a
    return points, False


def edge_coupling_hessian(model: LossModel, w_bar: Array, eta: float,
                          u: Array) -> tuple[float, float]:
    """Quadratic forms of the coupling Hessian along (u, u) and (u, -u).

    Moving both iterates together sees 2 u^T H u; splitting them apart
    sees 2 u^T (H - (2/eta) I) u, which changes sign exactly when the
    directional curvature crosses 2/eta. Both values are cross-checked
    against the assembled 2d x 2d block matrix.
    """
    u = np.asarray(u, dtype=float)
    H = model.hessian_dense(np.asarray(w_bar, float))
    diag_form = 2.0 * float(u @ (H @ u))
    anti_form = diag_form - 4.0 / eta * float(u @ u)

    d = H.shape[0]
    inv_eta = 1.0 / eta
    block = np.block([[H - inv_eta * np.eye(d), inv_eta * np.eye(d)],
                      [inv_eta * np.eye(d), H - inv_eta * np.eye(d)]])
    vd = np.concatenate([u, u])
    va = np.concatenate([u, -u])
    scale = max(1.0, abs(diag_form), abs(anti_form))
    if abs(float(vd @ (block @ vd)) - diag_form) > 1e-10 * scale \
            or abs(float(va @ (block @ va)) - anti_form) > 1e-10 * scale:
        raise AssertionError("block-Hessian cross-check failed")
    return diag_form, anti_form


def fit_scaling_exponent(etas, amplitudes, eta_c: float) -> float:
    """Least-squares slope of log amplitude against log(eta - eta_c)."""
    etas = np.asarray(etas, dtype=float)
    amps = np.asarray(amplitudes, dtype=float)
    mask = (etas > eta_c) & (amps > 0)
    if int(mask.sum()) < 2:
        raise ValueError("need at least two points above the threshold")
    x = np.log(etas[mask] - eta_c)
    y = np.log(amps[mask])
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)
