"""Differentiable objectives with analytic gradients and Hessian-vector products.

Includes quadratic bowls, a scalar cubic/quartic family, the two-layer
linear network together with its balanced-minimizer geometry (normal
slice, zero-padding between hidden widths), and a small dense MLP on a
synthetic teacher dataset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .numerics import DENSE_DIM_LIMIT

__all__ = [
    "LossModel",
    "QuadraticModel",
    "ScalarPolyModel",
    "TwoLayerLinearModel",
    "MlpModel",
    "LinearNetGeometry",
    "Dataset",
    "make_quadratic",
    "make_scalar_poly",
    "make_two_layer_linear",
    "make_mlp",
    "make_synthetic_dataset",
    "balanced_minimizer",
    "normal_embed",
    "width_pad",
]

Array = NDArray[np.float64]


class LossModel:
    """Base interface for a differentiable objective.

    Subclasses provide ``dim``, ``value``, ``gradient`` and ``hvp``.
    ``hessian_dense`` is assembled from HVPs by default and is only
    available for dim <= 512. ``inf_value`` is a declared lower bound on
    the loss over the region the bundled experiments visit (used by the
    curvature-forcing bound); None means unknown.
    """

    dim: int
    name: str = "loss"
    inf_value: float | None = None

    def value(self, w: Array) -> float:
        raise NotImplementedError

    def gradient(self, w: Array) -> Array:
        raise NotImplementedError

    def hvp(self, w: Array, v: Array) -> Array:
        raise NotImplementedError

    def hessian_dense(self, w: Array) -> Array:
        if self.dim > DENSE_DIM_LIMIT:
            raise ValueError(
                f"dense Hessian only available for dim <= {DENSE_DIM_LIMIT} "
                f"(model has dim {self.dim})")
        w = np.asarray(w, dtype=float)
        cols = [self.hvp(w, e) for e in np.eye(self.dim)]
        H = np.column_stack(cols)
        return (H + H.T) / 2.0

    def directional_curvature(self, w: Array, u: Array) -> float:
        """u^T H(w) u for a unit direction u."""
        return float(np.dot(u, self.hvp(w, u)))


class QuadraticModel(LossModel):
    """L(w) = 0.5 (w - c)^T H (w - c) with constant symmetric H."""

    def __init__(self, H: Array, center: Array | float = 0.0):
        H = np.atleast_2d(np.asarray(H, dtype=float))
        if H.shape[0] != H.shape[1]:
            raise ValueError("H must be square")
        scale = float(np.max(np.abs(H))) or 1.0
        if float(np.max(np.abs(H - H.T))) > 1e-12 * scale:
            raise ValueError("H must be symmetric")
        self.H = H
        self.dim = H.shape[0]
        c = np.asarray(center, dtype=float)
        self.center = np.full(self.dim, float(c)) if c.ndim == 0 else c.copy()
        if self.center.shape != (self.dim,):
            raise ValueError("center shape does not match H")
        self.name = f"quadratic(dim={self.dim})"
        evals = np.linalg.eigvalsh(self.H)
        self.inf_value = 0.0 if evals[0] >= -1e-12 * max(scale, 1.0) else None

    def value(self, w):
        r = np.asarray(w, float) - self.center
        return float(0.5 * r @ (self.H @ r))

    def gradient(self, w):
        return self.H @ (np.asarray(w, float) - self.center)

    def hvp(self, w, v):
        return self.H @ np.asarray(v, float)

    def hessian_dense(self, w):
        return self.H.copy()


class ScalarPolyModel(LossModel):
    """One-dimensional L(x) = lam/2 x^2 + gamma/3 x^3 + beta/4 x^4.

    The cubic term makes the directional curvature profile along a step
    linear in the interior parameter, which gives closed-form interior
    localization points; the quartic term controls the period-two branch.
    ``inf_value = 0`` refers to the basin of the critical point at 0
    (the global infimum is -inf when beta < 0 or gamma != 0).
    """

    dim = 1

    def __init__(self, lam: float, gamma: float = 0.0, beta: float = 0.0):
        self.lam = float(lam)
        self.gamma = float(gamma)
        self.beta = float(beta)
        self.name = f"scalar_poly(lam={lam:g},gamma={gamma:g},beta={beta:g})"
        self.inf_value = 0.0 if self.lam > 0 else None

    def value(self, w):
        x = float(np.asarray(w).reshape(()))
        return 0.5 * self.lam * x * x + self.gamma / 3.0 * x ** 3 + 0.25 * self.beta * x ** 4

    def gradient(self, w):
        x = float(np.asarray(w).reshape(()))
        return np.array([self.lam * x + self.gamma * x * x + self.beta * x ** 3])

    def hvp(self, w, v):
        x = float(np.asarray(w).reshape(()))
        return self.second_derivative(x) * np.asarray(v, float)

    def hessian_dense(self, w):
        x = float(np.asarray(w).reshape(()))
        return np.array([[self.second_derivative(x)]])

    def second_derivative(self, x: float) -> float:
        return self.lam + 2.0 * self.gamma * x + 3.0 * self.beta * x * x

    def third_derivative(self, x: float) -> float:
        return 2.0 * self.gamma + 6.0 * self.beta * x

    def fourth_derivative(self, x: float) -> float:
        return 6.0 * self.beta


class TwoLayerLinearModel(LossModel):
    """L(W1, W2) = 0.5 ||W2 W1 - M||_F^2.

    The parameter vector packs W1 (h x d, row-major) first, then W2
    (p x h, row-major). This packing order is fixed; all geometry
    helpers in this module respect it.
    """

    def __init__(self, M: Array, hidden: int):
        M = np.atleast_2d(np.asarray(M, dtype=float))
        self.M = M
        self.p, self.d = M.shape
        self.h = int(hidden)
        if self.h < 1:
            raise ValueError("hidden width must be positive")
        self.dim = self.h * self.d + self.p * self.h
        self.name = f"two_layer_linear(p={self.p},h={self.h},d={self.d})"
        self.inf_value = 0.0

    def unpack(self, w: Array) -> tuple[Array, Array]:
        w = np.asarray(w, dtype=float)
        n1 = self.h * self.d
        W1 = w[:n1].reshape(self.h, self.d)
        W2 = w[n1:].reshape(self.p, self.h)
        return W1, W2

    def pack(self, W1: Array, W2: Array) -> Array:
        if W1.shape != (self.h, self.d) or W2.shape != (self.p, self.h):
            raise ValueError("factor shapes do not match the model")
        return np.concatenate([np.ravel(W1), np.ravel(W2)])

    def value(self, w):
        W1, W2 = self.unpack(w)
        R = W2 @ W1 - self.M
        return float(0.5 * np.sum(R * R))

    def gradient(self, w):
        W1, W2 = self.unpack(w)
        R = W2 @ W1 - self.M
        return self.pack(W2.T @ R, R @ W1.T)

    def hvp(self, w, v):
        W1, W2 = self.unpack(w)
        V1, V2 = self.unpack(v)
        R = W2 @ W1 - self.M
        dR = W2 @ V1 + V2 @ W1
        return self.pack(V2.T @ R + W2.T @ dR, dR @ W1.T + R @ V1.T)


def _rank_from_singular_values(s: Array, rank: int | None) -> int:
    if rank is not None:
        return int(rank)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > 1e-12 * s[0]))


@dataclass
class LinearNetGeometry:
    """Balanced-minimizer geometry of a two-layer linear network.

    Holds the target SVD, the canonical balanced minimizer at a given
    hidden width, and the (Y, B, G)-block embedding of the normal space
    of the minimum manifold. All embeddings are expressed in the packed
    parameter coordinates of :class:`TwoLayerLinearModel`.
    """

    M: Array
    h: int
    r: int
    sigma: Array          # singular values, length r, descending
    U: Array              # p x p orthogonal
    V: Array              # d x d orthogonal
    w_bar: Array = field(init=False)
    model: TwoLayerLinearModel = field(init=False)

    def __post_init__(self):
        if self.r > self.h:
            raise ValueError(f"hidden width {self.h} below target rank {self.r}")
        if self.r >= 2 and not np.all(np.diff(self.sigma) <= 1e-12):
            raise ValueError("singular values must be non-increasing")
        if self.r >= 1 and self.sigma[self.r - 1] <= 0:
            raise ValueError("positive singular values required")
        self.model = TwoLayerLinearModel(self.M, self.h)
        p, d, h, r = self.model.p, self.model.d, self.h, self.r
        rootS = np.sqrt(self.sigma)
        W1c = np.zeros((h, d))
        W2c = np.zeros((p, h))
        W1c[:r, :r] = np.diag(rootS)
        W2c[:r, :r] = np.diag(rootS)
        self.w_bar = self.model.pack(W1c @ self.V.T, self.U @ W2c)

    @property
    def normal_dim(self) -> int:
        p, d, r = self.model.p, self.model.d, self.r
        return r * r + r * (d - r) + r * (p - r)

    def embed(self, Y: Array, B: Array, G: Array) -> Array:
        """Packed tangent vector for normal-space coordinates (Y, B, G)."""
        p, d, h, r = self.model.p, self.model.d, self.h, self.r
        Y = np.zeros((r, r)) if Y is None else np.atleast_2d(np.asarray(Y, float))
        B = np.zeros((r, d - r)) if B is None else np.asarray(B, float).reshape(r, d - r)
        G = np.zeros((p - r, r)) if G is None else np.asarray(G, float).reshape(p - r, r)
        if Y.shape != (r, r):
            raise ValueError(f"Y must be {r}x{r}")
        rootS = np.sqrt(self.sigma)
        dW1 = np.zeros((h, d))
        dW2 = np.zeros((p, h))
        dW1[:r, :r] = rootS[:, None] * Y
        dW1[:r, r:] = B
        dW2[:r, :r] = Y * rootS[None, :]
        dW2[r:, :r] = G
        return self.model.pack(dW1 @ self.V.T, self.U @ dW2)

    def decode(self, xi: Array) -> tuple[Array, Array, Array, float]:
        """Inverse of :meth:`embed`; returns (Y, B, G, slice residual).

        The residual is the norm of the part of ``xi`` that does not lie
        in the normal slice.
        """
        p, d, r = self.model.p, self.model.d, self.r
        dW1, dW2 = self.model.unpack(np.asarray(xi, float))
        C1 = dW1 @ self.V        # canonical coordinates
        C2 = self.U.T @ dW2
        rootS = np.sqrt(self.sigma)
        Y1 = C1[:r, :r] / rootS[:, None]
        Y2 = C2[:r, :r] / rootS[None, :]
        Y = (Y1 + Y2) / 2.0
        B = C1[:r, r:]
        G = C2[r:, :r]
        residual = float(np.linalg.norm(self.embed(Y, B, G) - np.asarray(xi, float)))
        return Y, B, G, residual

    def normal_basis(self) -> tuple[Array, Array]:
        """Orthonormal basis of the normal space with its curvature spectrum.

        Returns (S, lam): S has one column per basis vector, and lam[i]
        is the restricted-Hessian eigenvalue of column i. Y-block units
        give sigma_i + sigma_j, B-units give sigma_i, G-units sigma_j.
        """
        p, d, r = self.model.p, self.model.d, self.r
        cols, lams = [], []
        for i in range(r):
            for j in range(r):
                Y = np.zeros((r, r))
                Y[i, j] = 1.0 / math.sqrt(self.sigma[i] + self.sigma[j])
                cols.append(self.embed(Y, None, None))
                lams.append(self.sigma[i] + self.sigma[j])
        for i in range(r):
            for b in range(d - r):
                B = np.zeros((r, d - r))
                B[i, b] = 1.0
                cols.append(self.embed(None, B, None))
                lams.append(self.sigma[i])
        for a in range(p - r):
            for j in range(r):
                G = np.zeros((p - r, r))
                G[a, j] = 1.0
                cols.append(self.embed(None, None, G))
                lams.append(self.sigma[j])
        return np.column_stack(cols), np.array(lams)

    def transverse_spectrum(self) -> Array:
        """Eigenvalues of the Hessian restricted to the normal space, descending."""
        _, lams = self.normal_basis()
        return np.sort(lams)[::-1]

    def sharp_direction(self) -> Array:
        """Unit eigenvector of the largest transverse eigenvalue 2*sigma_1."""
        r = self.r
        Y = np.zeros((r, r))
        Y[0, 0] = 1.0 / math.sqrt(2.0 * self.sigma[0])
        return self.embed(Y, None, None)

    def with_width(self, h: int) -> "LinearNetGeometry":
        """Same target and SVD frame at a different hidden width."""
        return LinearNetGeometry(self.M, int(h), self.r, self.sigma, self.U, self.V)


def balanced_minimizer(M: Array, hidden: int,
                       rank: int | None = None) -> tuple[Array, LinearNetGeometry]:
    """Canonical balanced global minimizer of the two-layer linear loss.

    Returns the packed parameter vector and the associated geometry.
    Raises when the hidden width is below the target rank.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    U, s, Vt = np.linalg.svd(M, full_matrices=True)
    r = _rank_from_singular_values(s, rank)
    if r > hidden:
        raise ValueError(f"hidden width {hidden} below target rank {r}")
    geom = LinearNetGeometry(M, int(hidden), r, s[:r].copy(), U, Vt.T)
    return geom.w_bar, geom


def normal_embed(geometry: LinearNetGeometry, Y, B, G) -> Array:
    """Tangent perturbation in the normal space for block coordinates."""
    return geometry.embed(Y, B, G)


def width_pad(geometry_r: LinearNetGeometry, xi: Array, hidden: int,
              tol: float = 1e-10) -> Array:
    """Zero-padding of a minimal-width normal-slice vector to width ``hidden``.

    The padded vector evaluates to the identical restricted loss. Raises
    when ``xi`` has a component outside the normal slice.
    """
    Y, B, G, residual = geometry_r.decode(xi)
    scale = float(np.linalg.norm(xi)) or 1.0
    if residual > tol * scale:
        raise ValueError(
            f"input is not in the normal slice (projection residual {residual:.3e})")
    return geometry_r.with_width(hidden).embed(Y, B, G)


# ---------------------------------------------------------------------------
# Synthetic datasets and the MLP
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dataset:
    """Regression dataset: Gaussian inputs, teacher-generated targets."""

    X: Array
    Y: Array
    seed: int
    teacher_rank: int

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def to_csv(self, path) -> None:
        d_in, d_out = self.X.shape[1], self.Y.shape[1]
        header = ",".join([f"x{i}" for i in range(d_in)] + [f"y{j}" for j in range(d_out)])
        rows = [header]
        for xi, yi in zip(self.X, self.Y):
            rows.append(",".join(f"{v:.17g}" for v in list(xi) + list(yi)))
        with open(path, "w", newline="") as fh:
            fh.write("\r\n".join(rows) + "\r\n")


def make_synthetic_dataset(seed: int, n: int, d_in: int, d_out: int,
                           teacher_rank: int | None = None,
                           noise: float = 0.0,
                           teacher_spectrum=None) -> Dataset:
    """Deterministic Gaussian inputs with a low-rank linear teacher.

    Targets are y = T x (+ optional Gaussian noise) for a rank-limited
    teacher matrix T drawn from the same seed. ``teacher_spectrum``
    optionally pins the singular values of T (and overrides the rank);
    useful when a well-separated top mode is required.
    """
    if min(n, d_in, d_out) < 1:
        raise ValueError("n, d_in, d_out must be positive")
    if teacher_spectrum is not None:
        spec = np.sort(np.asarray(teacher_spectrum, dtype=float))[::-1]
        r = spec.size
    else:
        spec = None
        r = min(d_in, d_out) if teacher_rank is None else int(teacher_rank)
    if not 1 <= r <= min(d_in, d_out):
        raise ValueError("teacher rank out of range")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d_in))
    if spec is not None:
        Uq, _ = np.linalg.qr(rng.standard_normal((d_out, r)))
        Vq, _ = np.linalg.qr(rng.standard_normal((d_in, r)))
        T = (Uq * spec) @ Vq.T
    else:
        A = rng.standard_normal((d_out, r)) / math.sqrt(r)
        Bt = rng.standard_normal((r, d_in)) / math.sqrt(d_in)
        T = A @ Bt
    Y = X @ T.T
    if noise > 0.0:
        Y = Y + noise * rng.standard_normal(Y.shape)
    return Dataset(X=X, Y=Y, seed=int(seed), teacher_rank=r)


def _tanh_triplet(z):
    t = np.tanh(z)
    dp = 1.0 - t * t
    return t, dp, -2.0 * t * dp


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu_triplet(z):
    # Exact erf form; smooth to all orders.
    from scipy.special import erf
    cdf = 0.5 * (1.0 + erf(z * _INV_SQRT2))
    pdf = np.exp(-0.5 * z * z) * _INV_SQRT2PI
    val = z * cdf
    dp = cdf + z * pdf
    ddp = pdf * (2.0 - z * z)
    return val, dp, ddp


_ACTIVATIONS = {"tanh": _tanh_triplet, "gelu": _gelu_triplet}


class MlpModel(LossModel):
    """Fully connected network with mean-squared-error loss.

    Loss is (1/2n) sum_i ||f(x_i) - y_i||^2 over the dataset. Hidden
    layers use tanh or exact-erf GELU; the output layer is linear.
    Parameters pack per layer as weight rows then bias.
    """

    def __init__(self, widths, activation: str, dataset: Dataset):
        widths = [int(v) for v in widths]
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(_ACTIVATIONS)}")
        if dataset.X.shape[1] != widths[0] or dataset.Y.shape[1] != widths[-1]:
            raise ValueError("dataset shapes do not match network widths")
        self.widths = widths
        self.activation = activation
        self._act = _ACTIVATIONS[activation]
        self.dataset = dataset
        self.n_layers = len(widths) - 1
        self.dim = sum(widths[l + 1] * widths[l] + widths[l + 1]
                       for l in range(self.n_layers))
        self.name = (f"mlp({'-'.join(str(v) for v in widths)},{activation},"
                     f"n={dataset.n},seed={dataset.seed})")
        self.inf_value = 0.0  # MSE is nonnegative

    def init_params(self, seed: int, scale: float = 1.0) -> Array:
        """Gaussian init, std scale/sqrt(fan_in) per layer, zero biases."""
        rng = np.random.default_rng(seed)
        parts = []
        for l in range(self.n_layers):
            fan_in, fan_out = self.widths[l], self.widths[l + 1]
            W = rng.standard_normal((fan_out, fan_in)) * (scale / math.sqrt(fan_in))
            parts.append(np.ravel(W))
            parts.append(np.zeros(fan_out))
        return np.concatenate(parts)

    def unpack(self, w: Array):
        w = np.asarray(w, dtype=float)
        params, pos = [], 0
        for l in range(self.n_layers):
            fan_in, fan_out = self.widths[l], self.widths[l + 1]
            W = w[pos:pos + fan_out * fan_in].reshape(fan_out, fan_in)
            pos += fan_out * fan_in
            b = w[pos:pos + fan_out]
            pos += fan_out
            params.append((W, b))
        return params

    def pack(self, params) -> Array:
        return np.concatenate([np.concatenate([np.ravel(W), np.ravel(b)])
                               for W, b in params])

    def _forward(self, params, X):
        A = X
        acts = [A]        # post-activation per layer, acts[0] = inputs
        pre = []          # pre-activation per layer
        dphis, ddphis = [], []
        for l, (W, b) in enumerate(params):
            Z = A @ W.T + b
            pre.append(Z)
            if l < self.n_layers - 1:
                A, dp, ddp = self._act(Z)
                dphis.append(dp)
                ddphis.append(ddp)
            else:
                A = Z
                dphis.append(np.ones_like(Z))
                ddphis.append(np.zeros_like(Z))
            acts.append(A)
        return acts, pre, dphis, ddphis

    def _value_grad(self, w, X, Y):
        params = self.unpack(w)
        acts, _, dphis, _ = self._forward(params, X)
        n = X.shape[0]
        resid = acts[-1] - Y
        val = float(0.5 * np.sum(resid * resid) / n)
        D = resid / n
        grads = [None] * self.n_layers
        for l in range(self.n_layers - 1, -1, -1):
            W, _ = params[l]
            grads[l] = (D.T @ acts[l], D.sum(axis=0))
            if l > 0:
                D = (D @ W) * dphis[l - 1]
        return val, self.pack(grads)

    def value(self, w):
        return self._value_grad(w, self.dataset.X, self.dataset.Y)[0]

    def gradient(self, w):
        return self._value_grad(w, self.dataset.X, self.dataset.Y)[1]

    def gradient_batch(self, w, indices) -> Array:
        """Gradient of the same half-MSE averaged over the given sample rows."""
        idx = np.asarray(indices, dtype=int)
        return self._value_grad(w, self.dataset.X[idx], self.dataset.Y[idx])[1]

    def hvp(self, w, v):
        params = self.unpack(w)
        tang = self.unpack(v)
        X, Y = self.dataset.X, self.dataset.Y
        n = X.shape[0]
        acts, _, dphis, ddphis = self._forward(params, X)

        # Tangent-linear forward pass.
        RA = np.zeros_like(X)
        RAs = [RA]
        RZs = []
        for l, ((W, _), (Vw, vb)) in enumerate(zip(params, tang)):
            RZ = RAs[l] @ W.T + acts[l] @ Vw.T + vb
            RZs.append(RZ)
            RA = dphis[l] * RZ
            RAs.append(RA)

        resid = acts[-1] - Y
        D = resid / n
        RD = RAs[-1] / n
        hv = [None] * self.n_layers
        for l in range(self.n_layers - 1, -1, -1):
            W, _ = params[l]
            Vw, _ = tang[l]
            hv[l] = (RD.T @ acts[l] + D.T @ RAs[l], RD.sum(axis=0))
            if l > 0:
                back = D @ W
                RD = ((RD @ W + D @ Vw) * dphis[l - 1]
                      + back * ddphis[l - 1] * RZs[l - 1])
                D = back * dphis[l - 1]
        return self.pack(hv)


def make_quadratic(H, center=0.0) -> QuadraticModel:
    return QuadraticModel(H, center)


def make_scalar_poly(lam, gamma=0.0, beta=0.0) -> ScalarPolyModel:
    return ScalarPolyModel(lam, gamma, beta)


def make_two_layer_linear(M, hidden) -> TwoLayerLinearModel:
    model = TwoLayerLinearModel(M, hidden)
    _, s, _ = np.linalg.svd(model.M)
    if _rank_from_singular_values(s, None) > model.h:
        raise ValueError("hidden width below rank of the target")
    return model


def make_mlp(widths, activation, dataset) -> MlpModel:
    return MlpModel(widths, activation, dataset)
