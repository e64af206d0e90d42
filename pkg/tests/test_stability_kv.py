"""Recoil, oscillatory cancellation, excursions, propagators, and strain."""

import math

import numpy as np
import pytest

from edge_lab import stability_kv as kv
from edge_lab.loss_models import (Dataset, make_mlp, make_quadratic,
                                  make_scalar_poly, make_synthetic_dataset,
                                  make_two_layer_linear)
from edge_lab.numerics import uniform_rule
from edge_lab.trajectory import run_gd, run_pair_gd


class TestRecoil:
    def test_supercritical_growth(self):
        # lam = 5 at eta = 0.5 sits one unit above the threshold
        log = run_gd(make_scalar_poly(5.0), np.array([1.0]), 0.5, 8)
        inner, predicted, growth = kv.recoil_check(log, 0)
        nd2 = float(log.steps[0] @ log.steps[0])
        assert inner == pytest.approx(-1.5 * nd2, abs=1e-12)
        assert inner == pytest.approx(predicted, abs=1e-12)
        assert growth == pytest.approx(1.5, abs=1e-12)
        assert growth >= 1 + 0.5 * 1.0

    def test_subcritical_inner_product(self):
        log = run_gd(make_scalar_poly(3.0), np.array([1.0]), 0.5, 8)
        inner, predicted, _ = kv.recoil_check(log, 0)
        nd2 = float(log.steps[0] @ log.steps[0])
        assert inner == pytest.approx(-0.5 * nd2, abs=1e-13)

    def test_sustained_growth_compounds(self):
        log = run_gd(make_scalar_poly(5.0), np.array([1e-4]), 0.5, 6)
        d0 = np.linalg.norm(log.steps[0])
        d5 = np.linalg.norm(log.steps[5])
        assert d5 >= 1.5 ** 5 * d0 * (1 - 1e-12)

    def test_identity_on_nonquadratic(self):
        model = make_scalar_poly(1.0, 0.8, -1.0)
        log = run_gd(model, np.array([0.25]), 2.2, 120)
        for k in range(log.num_steps - 1):
            inner, predicted, _ = kv.recoil_check(log, k)
            nd2 = float(log.steps[k] @ log.steps[k])
            assert abs(inner - predicted) <= 1e-10 * max(nd2, abs(predicted))


class TestOscillatoryBound:
    def test_constant_forcing_alternation(self):
        eta, u = 0.3, 0.7
        T = 9  # odd horizon ends right after a kick: bound is tight
        xT, bound = kv.oscillatory_bound([-1.0] * T, [u] * T, eta)
        assert bound == pytest.approx(eta * u, abs=1e-15)
        assert xT == pytest.approx(eta * u, abs=1e-13)

    def test_zero_multiplier_keeps_last_kick(self):
        eta = 0.4
        us = [0.3, -0.2, 0.9]
        xT, bound = kv.oscillatory_bound([0.0] * 3, us, eta)
        assert xT == pytest.approx(eta * 0.9, abs=1e-15)
        assert xT <= bound + 1e-15

    def test_thousand_random_cases(self):
        rng = np.random.default_rng(12)
        for _ in range(1000):
            T = int(rng.integers(1, 200))
            m = rng.uniform(-1.0, 0.0, T)
            u = np.cumsum(rng.standard_normal(T)) * rng.uniform(0.1, 3.0)
            xT, bound = kv.oscillatory_bound(m, u, float(rng.uniform(0.01, 2.0)))
            assert xT <= bound + 1e-12

    def test_multiplier_range_enforced(self):
        with pytest.raises(ValueError):
            kv.oscillatory_bound([0.5], [1.0], 0.1)
        with pytest.raises(ValueError):
            kv.oscillatory_bound([-1.2], [1.0], 0.1)


class TestExcursion:
    def test_inside_window(self):
        assert kv.excursion_kappa(np.diag([3.0, 1.0]), 0.5) == 0.0

    def test_above_window(self):
        assert kv.excursion_kappa(np.diag([5.0, 1.0]), 0.5) == pytest.approx(0.5)

    def test_negative_curvature(self):
        assert kv.excursion_kappa(np.diag([3.0, -1.0]), 0.5) == pytest.approx(0.5)

    def test_zero_iff_spectrum_in_window(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            n = int(rng.integers(2, 6))
            evals = rng.uniform(-1.0, 5.0, n)
            Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
            A = (Q * evals) @ Q.T
            A = (A + A.T) / 2
            kappa = kv.excursion_kappa(A, 0.5)
            inside = np.all(evals >= -1e-12) and np.all(evals <= 4.0 + 1e-12)
            assert (kappa <= 1e-10) == bool(inside)


def _quadratic_pair(K=12, eta=0.5):
    H = np.diag([3.0, 1.0])
    qa = make_quadratic(H, np.array([0.2, -0.1]))
    qb = make_quadratic(H, np.array([-0.3, 0.4]))
    pair = run_pair_gd(qa, qb, np.array([1.0, 1.0]), eta, K)
    return qa, qb, pair, H, eta


class TestPropagatorProduct:
    def test_identity_at_equal_indices(self):
        qa, _, pair, _, _ = _quadratic_pair()
        strain = kv.strain_run(pair, qa)
        np.testing.assert_array_equal(kv.propagator_product(strain, 3, 3), np.eye(2))

    def test_constant_matrix_power(self):
        qa, _, pair, H, eta = _quadratic_pair()
        strain = kv.strain_run(pair, qa)
        T = kv.propagator_product(strain, 4, 0)
        expected = np.linalg.matrix_power(np.eye(2) - eta * H, 4)
        np.testing.assert_allclose(T, expected, atol=1e-13)
        np.testing.assert_allclose(np.diag(T), [(-0.5) ** 4, 0.5 ** 4], atol=1e-13)
        assert kv.propagator_norm(T) == pytest.approx(0.0625, abs=1e-13)
        assert kv.propagator_norm(T) <= 1.0  # exp(sum kappa) = exp(0)

    def test_norm_bound_on_random_sequences(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            n = int(rng.integers(2, 8))
            eta = float(rng.uniform(0.1, 1.0))
            T = np.eye(n)
            ksum = 0.0
            for _ in range(int(rng.integers(1, 10))):
                A = rng.standard_normal((n, n))
                A = (A + A.T) / 2
                T = (np.eye(n) - eta * A) @ T
                ksum += kv.excursion_kappa(A, eta)
            assert kv.propagator_norm(T) <= math.exp(ksum) + 1e-10

    def test_index_bounds(self):
        qa, _, pair, _, _ = _quadratic_pair()
        strain = kv.strain_run(pair, qa)
        with pytest.raises(IndexError):
            kv.propagator_product(strain, 3, 5)


class TestStrainRun:
    def test_identical_objectives(self):
        model = make_quadratic(np.diag([3.0, 1.0]))
        pair = run_pair_gd(model, model, np.array([1.0, 0.5]), 0.4, 10)
        strain = kv.strain_run(pair, model)
        np.testing.assert_allclose(strain.delta, 0.0, atol=1e-15)
        np.testing.assert_allclose(strain.stress, 0.0, atol=1e-15)

    def test_quadratic_closed_form(self):
        """Constant curvature and stress: the strain is a geometric sum."""
        qa, qb, pair, H, eta = _quadratic_pair()
        strain = kv.strain_run(pair, qa)
        assert strain.residual.max() <= 1e-12
        P = np.eye(2) - eta * H
        f = H @ (qb.center - qa.center)
        np.testing.assert_allclose(strain.stress, np.tile(f, (12, 1)), atol=1e-13)
        for k in range(1, 13):
            geom_sum = sum(np.linalg.matrix_power(P, j) for j in range(k))
            np.testing.assert_allclose(strain.delta[k], -eta * geom_sum @ f,
                                       atol=1e-12)

    def test_polynomial_quadrature_exact(self):
        """Quartic objective: order-4 segment averages leave no residual."""
        net_a = make_two_layer_linear(np.diag([2.0, 1.0]), 2)
        net_b = make_two_layer_linear(np.array([[2.0, 0.1], [0.1, 1.0]]), 2)
        w0 = np.full(net_a.dim, 0.7)
        pair = run_pair_gd(net_a, net_b, w0, 0.25, 25)
        strain = kv.strain_run(pair, net_a)
        assert strain.residual.max() <= 1e-10

    def test_mlp_leave_one_out(self):
        ds = make_synthetic_dataset(3, 40, 5, 3, teacher_rank=2, noise=0.05)
        keep = np.arange(1, 40)
        ds2 = Dataset(X=ds.X[keep], Y=ds.Y[keep], seed=ds.seed,
                      teacher_rank=ds.teacher_rank)
        m1 = make_mlp([5, 6, 3], "tanh", ds)
        m2 = make_mlp([5, 6, 3], "tanh", ds2)
        pair = run_pair_gd(m1, m2, m1.init_params(seed=7), 0.3, 25)
        strain = kv.strain_run(pair, m1, rule=uniform_rule(8), adaptive=True)
        assert strain.residual.max() <= 1e-6
        assert np.linalg.norm(strain.delta[-1]) > 0

    def test_strain_bound_holds(self):
        qa, _, pair, _, _ = _quadratic_pair()
        strain = kv.strain_run(pair, qa)
        for k in range(1, strain.num_steps + 1):
            assert np.linalg.norm(strain.delta[k]) <= \
                kv.strain_bound_rhs(strain, k) + 1e-10

    def test_classical_window_linear_bound(self):
        """All step matrices inside [0, 2/eta]: strain is bounded by the
        plain accumulated stress (no exponential factor)."""
        qa, _, pair, _, eta = _quadratic_pair()
        strain = kv.strain_run(pair, qa)
        assert np.all(strain.kappa == 0.0)
        for k in range(1, strain.num_steps + 1):
            plain = eta * sum(np.linalg.norm(strain.stress[s]) for s in range(k))
            assert np.linalg.norm(strain.delta[k]) <= plain + 1e-12


class TestStrainViaPropagator:
    def test_empty_sum(self):
        qa, _, pair, _, _ = _quadratic_pair()
        strain = kv.strain_run(pair, qa)
        np.testing.assert_array_equal(kv.strain_via_propagator(strain, 0),
                                      np.zeros(2))

    def test_single_step(self):
        qa, _, pair, _, eta = _quadratic_pair()
        strain = kv.strain_run(pair, qa)
        np.testing.assert_allclose(kv.strain_via_propagator(strain, 1),
                                   -eta * strain.stress[0], atol=1e-15)

    def test_matches_logged_strain(self):
        qa, _, pair, _, _ = _quadratic_pair()
        strain = kv.strain_run(pair, qa)
        for k in (5, 10, 12):
            via = kv.strain_via_propagator(strain, k)
            err = np.linalg.norm(via - strain.delta[k])
            assert err <= 1e-10 * (1 + np.linalg.norm(strain.delta[k]))

    def test_recurrence_identity_machine_precision(self):
        """Rebuilding the strain from the stored step matrices reproduces the
        variation-of-constants formula exactly."""
        qa, _, pair, _, eta = _quadratic_pair()
        strain = kv.strain_run(pair, qa)
        delta = np.zeros(2)
        for k in range(strain.num_steps):
            delta = (np.eye(2) - eta * strain.A[k]) @ delta - eta * strain.stress[k]
            via = kv.strain_via_propagator(strain, k + 1)
            np.testing.assert_allclose(via, delta, atol=5e-16 * (1 + np.linalg.norm(delta)))


class TestSupercriticalRuns:
    def test_lengths_capped_on_bounded_run(self):
        model = make_scalar_poly(1.0, 0.0, -1.0)
        log = run_gd(model, np.array([0.3]), 2.5, 400)
        for start, length, cap in kv.supercritical_run_lengths(log):
            assert length <= cap

    def test_no_runs_below_threshold(self):
        log = run_gd(make_scalar_poly(3.0), np.array([1.0]), 0.5, 30)
        assert kv.supercritical_run_lengths(log) == []


class TestStrainCsv:
    def test_columns(self, tmp_path):
        qa, _, pair, _, _ = _quadratic_pair()
        strain = kv.strain_run(pair, qa)
        path = tmp_path / "strain.csv"
        kv.write_strain_csv(strain, path)
        lines = path.read_bytes().decode().strip().split("\r\n")
        assert lines[0] == ("k,strain_norm,stress_norm,kappa,"
                            "recurrence_residual,bound_rhs")
        assert len(lines) == 13
