"""Shared numerical kernels.

Quadrature rules on [0, 1] (uniform and triangular weight), bracketed
root finding, damped Newton solves, dense symmetric eigendecomposition,
iterative largest-eigenvalue estimation from Hessian-vector products,
and central finite-difference stencils for directional derivatives up
to fourth order.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import optimize
from scipy.sparse.linalg import LinearOperator, eigsh
from scipy.special import roots_jacobi

__all__ = [
    "DENSE_DIM_LIMIT",
    "MACHINE_EPS",
    "QuadratureRule",
    "uniform_rule",
    "triangular_rule",
    "integrate_uniform",
    "integrate_triangular",
    "brent_root",
    "newton_solve",
    "dense_eigh",
    "lambda_max_iter",
    "fd_directional",
    "fd_step",
    "BracketError",
    "EvaluationError",
    "NonConvergenceError",
    "SingularJacobianError",
    "CancellationWarning",
]

MACHINE_EPS = float(np.finfo(np.float64).eps)

# Dense linear-algebra paths are allowed up to this dimension; above it
# only matrix-free (HVP) routes may be used.
DENSE_DIM_LIMIT = 512


class EvaluationError(ValueError):
    """An integrand or objective produced a non-finite value."""


class BracketError(ValueError):
    """Root bracket is invalid (no sign change or empty interval)."""


class NonConvergenceError(RuntimeError):
    """Iteration hit its budget before reaching the requested tolerance."""

    def __init__(self, message: str, history: Sequence[float] | None = None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


class SingularJacobianError(RuntimeError):
    """Newton Jacobian is singular beyond the working subspace."""


class CancellationWarning(UserWarning):
    """Finite-difference stencil spread is near the rounding floor."""


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and weights on [0, 1] for one of the two step-segment weights.

    ``kind`` is "uniform" (plain average, weights sum to 1) or
    "triangular" (weight 2(1-tau), whose total mass on [0, 1] is also 1).
    A rule of order n integrates polynomials up to degree 2n-1 exactly.
    """

    kind: str
    order: int
    nodes: NDArray[np.float64]
    weights: NDArray[np.float64]

    def __post_init__(self):
        if self.kind not in ("uniform", "triangular"):
            raise ValueError(f"unknown rule kind {self.kind!r}")
        if self.order < 1:
            raise ValueError("quadrature order must be positive")
        if abs(float(np.sum(self.weights)) - 1.0) > 1e-12:
            raise ValueError("quadrature weights must sum to 1")


def uniform_rule(order: int = 4) -> QuadratureRule:
    """Gauss-Legendre rule mapped to [0, 1] with unit weight."""
    x, w = np.polynomial.legendre.leggauss(order)
    return QuadratureRule("uniform", order, (x + 1.0) / 2.0, w / 2.0)


def triangular_rule(order: int = 4) -> QuadratureRule:
    """Gauss-Jacobi rule for the weight 2(1-tau) on [0, 1].

    Weights are folded so that sum(w_i * f(tau_i)) approximates
    2 * integral_0^1 (1-tau) f(tau) dtau.
    """
    x, w = roots_jacobi(order, 1, 0)
    return QuadratureRule("triangular", order, (x + 1.0) / 2.0, w / 2.0)


def _quad_eval(f: Callable, rule: QuadratureRule):
    vals = []
    for tau in rule.nodes:
        v = np.asarray(f(float(tau)), dtype=float)
        if not np.all(np.isfinite(v)):
            raise EvaluationError(f"non-finite integrand value at node tau={tau!r}")
        vals.append(v)
    acc = rule.weights[0] * vals[0]
    for w, v in zip(rule.weights[1:], vals[1:]):
        acc = acc + w * v
    return acc


def integrate_uniform(f: Callable, rule: QuadratureRule | None = None):
    """Approximate integral_0^1 f(tau) dtau; exact for degree <= 2*order-1.

    ``f`` may return scalars or arrays (integrated componentwise).
    """
    if rule is None:
        rule = uniform_rule()
    if rule.kind != "uniform":
        raise ValueError("integrate_uniform requires a uniform rule")
    out = _quad_eval(f, rule)
    return float(out) if np.ndim(out) == 0 else out


def integrate_triangular(f: Callable, rule: QuadratureRule | None = None):
    """Approximate 2 * integral_0^1 (1-tau) f(tau) dtau."""
    if rule is None:
        rule = triangular_rule()
    if rule.kind != "triangular":
        raise ValueError("integrate_triangular requires a triangular rule")
    out = _quad_eval(f, rule)
    return float(out) if np.ndim(out) == 0 else out


def brent_root(f: Callable[[float], float], lo: float, hi: float,
               tol: float = 1e-12) -> float:
    """Root of ``f`` in [lo, hi] by Brent's method.

    Requires a sign change on the bracket; the returned point satisfies
    |f(x)| <= tol or lies in a bracket of width <= tol.
    """
    if not lo < hi:
        raise BracketError(f"empty bracket [{lo}, {hi}]")
    flo, fhi = f(lo), f(hi)
    if not (np.isfinite(flo) and np.isfinite(fhi)):
        raise EvaluationError("non-finite endpoint value in brent_root")
    if flo == 0.0:
        return float(lo)
    if fhi == 0.0:
        return float(hi)
    if flo * fhi > 0.0:
        raise BracketError(
            f"no sign change on [{lo}, {hi}]: f(lo)={flo:g}, f(hi)={fhi:g}")
    return float(optimize.brentq(f, lo, hi, xtol=tol, rtol=4 * MACHINE_EPS))


def newton_solve(F: Callable, J: Callable, x0, tol: float = 1e-12,
                 max_iter: int = 50) -> NDArray[np.float64]:
    """Solve F(x) = 0 by Newton's method with Jacobian oracle J.

    Returns x with ||F(x)||_2 <= tol. Raises SingularJacobianError when
    the Jacobian condition estimate exceeds 1e12, NonConvergenceError
    (carrying the residual history) when the budget runs out.
    """
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    history: list[float] = []
    for _ in range(max_iter):
        Fx = np.atleast_1d(np.asarray(F(x), dtype=float))
        res = float(np.linalg.norm(Fx))
        history.append(res)
        if not np.isfinite(res):
            raise EvaluationError("non-finite residual in newton_solve")
        if res <= tol:
            return x
        Jx = np.atleast_2d(np.asarray(J(x), dtype=float))
        if np.linalg.cond(Jx) > 1e12:
            raise SingularJacobianError(
                f"Jacobian condition estimate exceeds 1e12 at residual {res:g}")
        x = x - np.linalg.solve(Jx, Fx)
    Fx = np.atleast_1d(np.asarray(F(x), dtype=float))
    res = float(np.linalg.norm(Fx))
    history.append(res)
    if res <= tol:
        return x
    raise NonConvergenceError(
        f"newton_solve: residual {res:g} > tol {tol:g} after {max_iter} iterations",
        history)


def _check_symmetric(A: NDArray[np.float64]) -> NDArray[np.float64]:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("expected a square matrix")
    scale = float(np.max(np.abs(A))) or 1.0
    if float(np.max(np.abs(A - A.T))) > 1e-12 * scale:
        raise ValueError("matrix is not symmetric within 1e-12 relative")
    return A


def dense_eigh(A: NDArray[np.float64]):
    """Eigendecomposition of a symmetric matrix.

    Returns (eigenvalues ascending, orthonormal eigenvectors as columns).
    """
    A = _check_symmetric(A)
    return np.linalg.eigh(A)


def lambda_max_iter(hvp: Callable[[NDArray[np.float64]], NDArray[np.float64]],
                    dim: int, tol: float = 1e-9, max_iter: int = 1000,
                    seed: int = 0, v0: NDArray[np.float64] | None = None) -> float:
    """Largest (algebraically) eigenvalue of a symmetric operator.

    Lanczos iteration on the matrix-free operator; deterministic for a
    given seed. ``v0`` optionally seeds the Krylov space, in which case
    the estimate is at least the Rayleigh quotient of ``v0``. Symmetry
    of ``hvp`` is spot-checked on random vectors.
    """
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(dim)
    v = rng.standard_normal(dim)
    hu, hv = np.asarray(hvp(u), float), np.asarray(hvp(v), float)
    scale = max(np.linalg.norm(hu) * np.linalg.norm(v),
                np.linalg.norm(hv) * np.linalg.norm(u), 1.0)
    if abs(float(u @ hv - v @ hu)) > 1e-8 * scale:
        raise ValueError("hvp operator fails the symmetry spot-check")

    if dim <= 2:
        H = np.column_stack([np.asarray(hvp(e), float) for e in np.eye(dim)])
        return float(np.linalg.eigvalsh((H + H.T) / 2.0)[-1])

    start = rng.standard_normal(dim) if v0 is None else np.asarray(v0, float)
    op = LinearOperator((dim, dim), matvec=lambda x: np.asarray(hvp(x), float))
    try:
        vals = eigsh(op, k=1, which="LA", v0=start, tol=tol,
                     maxiter=max_iter, return_eigenvectors=False)
    except Exception as exc:  # ARPACK non-convergence
        raise NonConvergenceError(f"lambda_max_iter failed to converge: {exc}") from exc
    return float(vals[0])


def fd_step(order: int, w_norm: float = 0.0) -> float:
    """Default central-difference step balancing truncation and rounding."""
    if order in (1, 2):
        return MACHINE_EPS ** (1.0 / 3.0) * (1.0 + w_norm)
    if order in (3, 4):
        return MACHINE_EPS ** (1.0 / 5.0) * (1.0 + w_norm)
    raise ValueError("derivative order must be in {1, 2, 3, 4}")


# Central stencils: {order: (offsets, coefficients, h exponent)}
_STENCILS = {
    1: ((-1, 1), (-0.5, 0.5), 1),
    2: ((-1, 0, 1), (1.0, -2.0, 1.0), 2),
    3: ((-2, -1, 1, 2), (-0.5, 1.0, -1.0, 0.5), 3),
    4: ((-2, -1, 0, 1, 2), (1.0, -4.0, 6.0, -4.0, 1.0), 4),
}


def fd_directional(f: Callable, w, u, order: int, h: float | None = None) -> float:
    """Central-difference estimate of d^k/dt^k f(w + t*u) at t = 0.

    ``u`` must be unit norm; truncation error is O(h^2) for every
    supported order. Emits CancellationWarning when the sampled values
    are too close together for the stencil to resolve.
    """
    if order not in _STENCILS:
        raise ValueError("derivative order must be in {1, 2, 3, 4}")
    w = np.atleast_1d(np.asarray(w, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    nu = float(np.linalg.norm(u))
    if abs(nu - 1.0) > 1e-10:
        raise ValueError("direction u must have unit norm")
    if h is None:
        h = fd_step(order, float(np.linalg.norm(w)))
    if h <= 0:
        raise ValueError("step h must be positive")
    offsets, coeffs, power = _STENCILS[order]
    vals = np.array([float(f(w + (o * h) * u)) for o in offsets])
    if not np.all(np.isfinite(vals)):
        raise EvaluationError("non-finite function value in fd_directional")
    f0 = float(f(w))
    spread = float(vals.max() - vals.min())
    if spread < 1e3 * MACHINE_EPS * abs(f0):
        warnings.warn(
            f"stencil spread {spread:.3e} is below 1e3*eps*|f| for order {order}; "
            "the estimate may be dominated by rounding", CancellationWarning)
    return float(np.dot(coeffs, vals) / h ** power)
