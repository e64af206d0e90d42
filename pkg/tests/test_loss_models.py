"""Model derivatives, linear-net geometry, and synthetic datasets."""

import math

import numpy as np
import pytest

from edge_lab.loss_models import (Dataset, balanced_minimizer, make_mlp,
                                  make_quadratic, make_scalar_poly,
                                  make_synthetic_dataset,
                                  make_two_layer_linear, normal_embed,
                                  width_pad)
from edge_lab.numerics import dense_eigh


def _all_models():
    ds = make_synthetic_dataset(0, 40, 5, 3, teacher_rank=2, noise=0.05)
    return [
        make_quadratic(np.diag([3.0, 1.0]), 0.0),
        make_scalar_poly(1.0, 1.0, -1.0),
        make_two_layer_linear(np.diag([2.0, 1.0]), 2),
        make_two_layer_linear(np.array([[2.0, 0.0, 1.0], [0.0, 1.0, -0.5]]), 3),
        make_mlp([5, 6, 3], "tanh", ds),
        make_mlp([5, 6, 3], "gelu", ds),
    ]


def _fd_gradient(model, w, h=1e-6):
    return np.array([(model.value(w + h * e) - model.value(w - h * e)) / (2 * h)
                     for e in np.eye(model.dim)])


class TestDerivativeConsistency:
    @pytest.mark.parametrize("model", _all_models(), ids=lambda m: m.name)
    def test_gradient_matches_fd(self, model):
        """Analytic gradient vs central differences at 10 random points."""
        rng = np.random.default_rng(7)
        for _ in range(10):
            w = 0.5 * rng.standard_normal(model.dim)
            g = model.gradient(w)
            gfd = _fd_gradient(model, w)
            scale = max(1.0, float(np.max(np.abs(g))))
            assert np.max(np.abs(g - gfd)) <= 1e-5 * scale

    @pytest.mark.parametrize("model", _all_models(), ids=lambda m: m.name)
    def test_hvp_symmetric_and_linear(self, model):
        rng = np.random.default_rng(8)
        for _ in range(5):
            w = 0.5 * rng.standard_normal(model.dim)
            u = rng.standard_normal(model.dim)
            v = rng.standard_normal(model.dim)
            hu, hv = model.hvp(w, u), model.hvp(w, v)
            scale = max(1.0, np.linalg.norm(hu) * np.linalg.norm(v),
                        np.linalg.norm(hv) * np.linalg.norm(u))
            assert abs(float(u @ hv - v @ hu)) <= 1e-8 * scale
            lin = model.hvp(w, 2.0 * u - 3.0 * v)
            np.testing.assert_allclose(lin, 2 * hu - 3 * hv,
                                       atol=1e-9 * scale, rtol=1e-9)

    @pytest.mark.parametrize("model", _all_models(), ids=lambda m: m.name)
    def test_dense_hessian_matches_hvp(self, model):
        rng = np.random.default_rng(9)
        w = 0.5 * rng.standard_normal(model.dim)
        H = model.hessian_dense(w)
        for _ in range(3):
            v = rng.standard_normal(model.dim)
            hv = model.hvp(w, v)
            scale = max(1.0, float(np.max(np.abs(hv))))
            assert np.max(np.abs(H @ v - hv)) <= 1e-10 * scale


class TestScalarPoly:
    def test_value_example(self):
        model = make_scalar_poly(1.0, 0.0, -1.0)
        assert model.value([1.0]) == pytest.approx(0.25, abs=1e-15)

    def test_derivative_ladder(self):
        model = make_scalar_poly(2.0, 1.5, -0.5)
        x = 0.3
        assert model.gradient([x])[0] == pytest.approx(
            2.0 * x + 1.5 * x ** 2 - 0.5 * x ** 3, abs=1e-15)
        assert model.second_derivative(x) == pytest.approx(
            2.0 + 3.0 * x - 1.5 * x ** 2, abs=1e-15)
        assert model.third_derivative(x) == pytest.approx(3.0 - 3.0 * x, abs=1e-15)
        assert model.fourth_derivative(x) == pytest.approx(-3.0, abs=1e-15)


class TestQuadratic:
    def test_gradient_example(self):
        model = make_quadratic(np.diag([3.0, 1.0]), 0.0)
        np.testing.assert_allclose(model.gradient([1.0, 1.0]), [3.0, 1.0])

    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError):
            make_quadratic(np.array([[1.0, 2.0], [0.0, 1.0]]))


class TestLinearNetGeometry:
    def test_minimum_value_zero(self):
        w_bar, geom = balanced_minimizer(np.diag([2.0, 1.0]), 2)
        assert geom.model.value(w_bar) == pytest.approx(0.0, abs=1e-25)

    def test_scalar_case(self):
        w_bar, geom = balanced_minimizer(np.array([[4.0]]), 1)
        W1, W2 = geom.model.unpack(w_bar)
        assert W1[0, 0] == pytest.approx(2.0, abs=1e-12)
        assert W2[0, 0] == pytest.approx(2.0, abs=1e-12)

    def test_diagonal_target_factors(self):
        w_bar, geom = balanced_minimizer(np.diag([2.0, 1.0]), 2)
        W1, W2 = geom.model.unpack(w_bar)
        np.testing.assert_allclose(W1, np.diag([math.sqrt(2.0), 1.0]), atol=1e-14)
        np.testing.assert_allclose(W2, np.diag([math.sqrt(2.0), 1.0]), atol=1e-14)

    def test_balancedness_and_product(self):
        for M, h in ((np.diag([2.0, 1.0]), 2), (np.diag([2.0, 1.0]), 3),
                     (np.array([[1.5, 0.3, 0.0], [0.1, 0.8, -0.2]]), 3)):
            w_bar, geom = balanced_minimizer(M, h)
            W1, W2 = geom.model.unpack(w_bar)
            np.testing.assert_allclose(W2 @ W1, M, atol=1e-12)
            np.testing.assert_allclose(W1 @ W1.T, W2.T @ W2, atol=1e-12)
            assert np.linalg.norm(geom.model.gradient(w_bar)) <= 1e-12

    def test_padded_width_has_zero_rows(self):
        w_bar, geom = balanced_minimizer(np.diag([2.0, 1.0]), 3)
        W1, W2 = geom.model.unpack(w_bar)
        np.testing.assert_allclose(W1[2], 0.0, atol=1e-15)
        np.testing.assert_allclose(W2[:, 2], 0.0, atol=1e-15)

    def test_rank_error(self):
        with pytest.raises(ValueError):
            balanced_minimizer(np.diag([2.0, 1.0]), 1)

    def test_kernel_dimension_formula(self):
        """Null count of the dense Hessian equals h(d+p) - r(d+p-r)."""
        for p, d, r, h in ((2, 2, 2, 2), (2, 3, 2, 4), (3, 4, 2, 3)):
            rng = np.random.default_rng(p * 10 + d + h)
            U, _ = np.linalg.qr(rng.standard_normal((p, p)))
            V, _ = np.linalg.qr(rng.standard_normal((d, d)))
            s = np.sort(rng.uniform(0.5, 2.0, r))[::-1]
            M = (U[:, :r] * s) @ V[:, :r].T
            w_bar, geom = balanced_minimizer(M, h)
            H = geom.model.hessian_dense(w_bar)
            evals, vecs = dense_eigh(H)
            null_count = int(np.sum(evals < 1e-8 * evals[-1]))
            expected = h * (d + p) - r * (d + p - r)
            assert null_count == expected
            # the analytic normal basis is orthogonal to the numeric kernel
            S, _ = geom.normal_basis()
            kernel = vecs[:, evals < 1e-8 * evals[-1]]
            assert np.max(np.abs(S.T @ kernel)) <= 1e-8

    def test_normal_embed_zero(self):
        _, geom = balanced_minimizer(np.diag([2.0, 1.0]), 2)
        np.testing.assert_allclose(normal_embed(geom, np.zeros((2, 2)), None, None),
                                   0.0, atol=1e-16)

    def test_sharp_direction_is_top_eigenvector(self):
        w_bar, geom = balanced_minimizer(np.diag([2.0, 1.0]), 3)
        u_c = geom.sharp_direction()
        assert np.linalg.norm(u_c) == pytest.approx(1.0, abs=1e-12)
        Hu = geom.model.hvp(w_bar, u_c)
        np.testing.assert_allclose(Hu, 2.0 * geom.sigma[0] * u_c, atol=1e-10)

    def test_embedding_norm_identity(self):
        rng = np.random.default_rng(3)
        _, geom = balanced_minimizer(np.array([[1.7, 0.2, 0.1],
                                               [0.0, 0.9, -0.3]]), 4)
        r, p, d = geom.r, geom.model.p, geom.model.d
        rootS = np.sqrt(geom.sigma)
        for _ in range(20):
            Y = rng.standard_normal((r, r))
            B = rng.standard_normal((r, d - r))
            G = rng.standard_normal((p - r, r))
            v = normal_embed(geom, Y, B, G)
            expected = (np.sum((rootS[:, None] * Y) ** 2)
                        + np.sum((Y * rootS[None, :]) ** 2)
                        + np.sum(B ** 2) + np.sum(G ** 2))
            assert float(v @ v) == pytest.approx(expected, rel=1e-12)

    def test_width_pad_zero(self):
        _, geom = balanced_minimizer(np.diag([2.0, 1.0]), 2)
        xi = np.zeros(geom.model.dim)
        np.testing.assert_allclose(width_pad(geom, xi, 4), 0.0, atol=1e-16)

    def test_width_pad_loss_identity(self):
        """Padded slice vectors evaluate to the identical restricted loss."""
        rng = np.random.default_rng(5)
        w_r, geom = balanced_minimizer(np.diag([2.0, 1.0]), 2)
        for h in (2, 3, 5):
            geom_h = geom.with_width(h)
            for _ in range(100):
                xi = geom.embed(rng.standard_normal((2, 2)), None, None) * 0.4
                xi_h = width_pad(geom, xi, h)
                lr = geom.model.value(w_r + xi)
                lh = geom_h.model.value(geom_h.w_bar + xi_h)
                assert abs(lr - lh) <= 1e-13 * max(abs(lr), 1e-30)

    def test_width_pad_rejects_off_slice(self):
        w_bar, geom = balanced_minimizer(np.diag([2.0, 1.0]), 2)
        # kernel direction: A free, E = -sqrt(S) A / sqrt(S)
        A = np.array([[0.0, 1.0], [0.0, 0.0]])
        rootS = np.sqrt(geom.sigma)
        E = -(rootS[:, None] * A) / rootS[None, :]
        kvec = geom.model.pack(A, E)
        assert np.linalg.norm(geom.model.hvp(w_bar, kvec)) <= 1e-12
        with pytest.raises(ValueError, match="slice"):
            width_pad(geom, kvec, 3)


class TestSyntheticDataset:
    def test_determinism(self):
        a = make_synthetic_dataset(0, 20, 4, 3)
        b = make_synthetic_dataset(0, 20, 4, 3)
        assert np.array_equal(a.X, b.X) and np.array_equal(a.Y, b.Y)

    def test_shapes(self):
        ds = make_synthetic_dataset(1, 200, 10, 5, teacher_rank=3)
        assert ds.X.shape == (200, 10) and ds.Y.shape == (200, 5)

    def test_teacher_rank(self):
        ds = make_synthetic_dataset(2, 100, 8, 5, teacher_rank=3, noise=0.0)
        s = np.linalg.svd(ds.Y, compute_uv=False)
        assert s[2] > 1e-6
        assert s[3] <= 1e-10 * s[0]

    def test_noise_floor(self):
        ds = make_synthetic_dataset(2, 400, 8, 5, teacher_rank=3, noise=0.1)
        s = np.linalg.svd(ds.Y / math.sqrt(ds.n), compute_uv=False)
        assert s[3] < 0.5 * s[2]  # trailing values sit near the noise scale
        assert s[3] > 0.0

    def test_pinned_spectrum(self):
        ds = make_synthetic_dataset(3, 300, 6, 4, teacher_spectrum=[2.0, 1.0])
        M = np.linalg.lstsq(ds.X, ds.Y, rcond=None)[0].T
        s = np.linalg.svd(M, compute_uv=False)
        np.testing.assert_allclose(s[:2], [2.0, 1.0], atol=1e-10)

    def test_csv_round_trip(self, tmp_path):
        ds = make_synthetic_dataset(4, 5, 3, 2)
        path = tmp_path / "data.csv"
        ds.to_csv(path)
        raw = path.read_bytes().decode()
        assert raw.count("\r\n") == 6  # header + 5 samples, RFC 4180 line ends
        lines = raw.strip().split("\r\n")
        assert lines[0] == "x0,x1,x2,y0,y1"
        row = [float(v) for v in lines[1].split(",")]
        np.testing.assert_array_equal(row[:3], ds.X[0])
        np.testing.assert_array_equal(row[3:], ds.Y[0])


class TestMlp:
    def test_batch_gradient_full_equals_gradient(self):
        ds = make_synthetic_dataset(0, 30, 4, 2, teacher_rank=2)
        mlp = make_mlp([4, 6, 2], "tanh", ds)
        w = mlp.init_params(seed=1)
        np.testing.assert_allclose(mlp.gradient_batch(w, np.arange(30)),
                                   mlp.gradient(w), atol=1e-14)

    def test_shape_mismatch_rejected(self):
        ds = make_synthetic_dataset(0, 30, 4, 2)
        with pytest.raises(ValueError):
            make_mlp([5, 6, 2], "tanh", ds)

    def test_unknown_activation(self):
        ds = make_synthetic_dataset(0, 10, 4, 2)
        with pytest.raises(ValueError):
            make_mlp([4, 6, 2], "relu", ds)

    def test_init_deterministic(self):
        ds = make_synthetic_dataset(0, 10, 4, 2)
        mlp = make_mlp([4, 6, 2], "tanh", ds)
        assert np.array_equal(mlp.init_params(seed=3), mlp.init_params(seed=3))
