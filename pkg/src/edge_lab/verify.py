"""Named verification checks over the bundled models and runs.

Each check re-derives one family of identities or bounds (curvature
route agreement, telescoping balance, localization, branch scaling,
stability mechanisms, strain recurrence, noisy balance) at its pinned
tolerance and reports the measured residuals. The CLI `verify`
subcommand and the acceptance test suite both run these.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import bifurcation, edge_metrics, loss_models, stability_kv, trajectory
from .numerics import dense_eigh, lambda_max_iter, uniform_rule

__all__ = ["CheckResult", "SUITES", "run_suite", "CHECKS"]


@dataclass
class CheckResult:
    name: str
    passed: bool
    seconds: float
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed,
                "seconds": round(self.seconds, 3), "details": self.details}


def _timed(fn):
    def wrapper() -> CheckResult:
        t0 = time.perf_counter()
        passed, details = fn()
        return CheckResult(fn.__name__.removeprefix("_check_"),
                           bool(passed), time.perf_counter() - t0, details)
    wrapper.__name__ = fn.__name__
    return wrapper


# ---------------------------------------------------------------------------
# Bundled models and runs (built lazily, cached for the process lifetime)
# ---------------------------------------------------------------------------

_CACHE: dict = {}


def _cached(key, builder):
    if key not in _CACHE:
        _CACHE[key] = builder()
    return _CACHE[key]


def _quad_nd(dim: int, seed: int, eta: float = 0.5):
    rng = np.random.default_rng(seed)
    # Spectrum kept away from 2/eta so no mode decays to the rounding floor.
    lo = rng.uniform(0.2, 1.7, size=dim // 2)
    hi = rng.uniform(2.3, 3.8, size=dim - dim // 2)
    Q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    H = Q @ np.diag(np.concatenate([lo, hi])) @ Q.T
    H = (H + H.T) / 2.0
    return loss_models.make_quadratic(H, 0.0)


def _bundle():
    """Bundled runs exercised by the localization / mechanism checks."""
    def build():
        runs = {}
        q1 = loss_models.make_quadratic([[3.0]], 0.0)
        runs["quad1d"] = (q1, trajectory.run_gd(q1, np.array([1.0]), 0.5, 40))
        qn = _quad_nd(8, seed=2)
        rng = np.random.default_rng(3)
        runs["quad_nd"] = (qn, trajectory.run_gd(qn, rng.standard_normal(8), 0.5, 80))
        cubic = loss_models.make_scalar_poly(1.0, 1.0, 0.0)
        runs["cubic1d"] = (cubic, trajectory.run_gd(cubic, np.array([0.4]), 0.5, 40))
        quartic = loss_models.make_scalar_poly(1.0, 0.0, -1.0)
        runs["quartic_eos"] = (quartic, trajectory.run_gd(quartic, np.array([0.3]), 2.5, 200))
        w_bar, geom = loss_models.balanced_minimizer(np.diag([2.0, 1.0]), 2)
        net = geom.model
        w0 = w_bar + 1e-2 * geom.sharp_direction()
        runs["linear_net_eos"] = (net, trajectory.run_gd(net, w0, 0.55, 400))
        mlp, log = _mlp_eos_short()
        runs["mlp_eos"] = (mlp, log)
        return runs
    return _cached("bundle", build)


def _mlp_model():
    def build():
        ds = loss_models.make_synthetic_dataset(0, 200, 10, 5, teacher_rank=3,
                                                noise=0.1)
        return loss_models.make_mlp([10, 16, 16, 5], "tanh", ds)
    return _cached("mlp_model", build)


def _mlp_eos_short():
    def build():
        mlp = _mlp_model()
        return mlp, trajectory.run_gd(mlp, mlp.init_params(seed=1), 0.5, 300)
    return _cached("mlp_eos_short", build)


def _mlp_eos_long():
    def build():
        mlp = _mlp_model()
        log = trajectory.run_gd(mlp, mlp.init_params(seed=1), 0.5, 4000)
        report = edge_metrics.edge_balance_report(mlp, log, route="quadrature")
        return mlp, log, report
    return _cached("mlp_eos_long", build)


def _sweep_net():
    def build():
        ds = loss_models.make_synthetic_dataset(11, 200, 10, 5, noise=0.0,
                                                teacher_spectrum=[2.0, 1.0, 0.5])
        M = np.linalg.lstsq(ds.X, ds.Y, rcond=None)[0].T
        w_bar, geom = loss_models.balanced_minimizer(M, 3, rank=3)
        return w_bar, geom
    return _cached("sweep_net", build)


# ---------------------------------------------------------------------------
# Checks (one per acceptance criterion family)
# ---------------------------------------------------------------------------

@_timed
def _check_quadratic_exactness():
    """Routes agree with u^T H u; step propagator and telescoping are exact."""
    tol = 1e-10
    worst_route = worst_prop = worst_tel = 0.0
    for dim, seed in ((1, 0), (5, 1), (20, 2)):
        model = _quad_nd(dim, seed) if dim > 1 else loss_models.make_quadratic([[3.0]], 0.0)
        rng = np.random.default_rng(seed + 10)
        log = trajectory.run_gd(model, rng.standard_normal(dim), 0.5, 100)
        H = model.H
        for k in range(log.num_steps):
            d = log.steps[k]
            nd = float(np.linalg.norm(d))
            if nd < edge_metrics.DEGENERATE_STEP:
                continue
            u = d / nd
            uhu = float(u @ (H @ u))
            vals = [
                edge_metrics.step_mean_curvature_exact(log, k),
                edge_metrics.effective_curvature_from_loss(log, k),
                edge_metrics.step_mean_curvature_quadrature(model, log, k),
                edge_metrics.effective_curvature_quadrature(model, log, k),
            ]
            worst_route = max(worst_route, max(abs(v - uhu) for v in vals))
            if k + 1 < log.num_steps:
                pred = d - log.eta * (H @ d)
                worst_prop = max(worst_prop, float(np.linalg.norm(log.steps[k + 1] - pred)))
        rep = edge_metrics.edge_balance_report(model, log, route="quadrature")
        worst_tel = max(worst_tel, rep.identity_residual)
    passed = max(worst_route, worst_prop, worst_tel) <= tol
    return passed, {"route_agreement": worst_route, "propagator": worst_prop,
                    "telescoping": worst_tel, "tolerance": tol}


@_timed
def _check_edge_balance_independent():
    """Quadrature-route telescoping balance on polynomial and MLP runs."""
    details = {}
    ok = True

    quartic = loss_models.make_scalar_poly(1.0, 0.0, -1.0)
    log_q = trajectory.run_gd(quartic, np.array([0.3]), 2.5, 2000)
    rep_q = edge_metrics.edge_balance_report(quartic, log_q, route="quadrature")
    tol_q = 1e-8 * max(1.0, abs(float(log_q.losses[0])))
    details["quartic_residual"] = rep_q.identity_residual
    details["quartic_tolerance"] = tol_q
    ok &= rep_q.identity_residual <= tol_q

    w_bar, geom = loss_models.balanced_minimizer(np.diag([2.0, 1.0]), 2)
    net = geom.model
    log_n = trajectory.run_gd(net, w_bar + 1e-2 * geom.sharp_direction(), 0.55, 2000)
    rep_n = edge_metrics.edge_balance_report(net, log_n, route="quadrature")
    tol_n = 1e-8 * max(1.0, abs(float(log_n.losses[0])))
    details["linear_net_residual"] = rep_n.identity_residual
    details["linear_net_tolerance"] = tol_n
    ok &= rep_n.identity_residual <= tol_n

    _, log_m, rep_m = _mlp_eos_long()
    rel = rep_m.identity_residual / max(1.0, abs(2.0 * rep_m.loss_drop))
    details["mlp_relative_residual"] = rel
    details["mlp_tolerance"] = 1e-5
    ok &= rel <= 1e-5
    return ok, details


@_timed
def _check_mlp_saturation():
    """Weighted-mean curvature saturates at 2/eta; forcing bound at every K."""
    mlp, log, rep = _mlp_eos_long()
    eta = log.eta
    thr = 2.0 / eta
    lam0 = lambda_max_iter(lambda v: mlp.hvp(log.w(0), v), mlp.dim, seed=0)
    w, r = rep.weights, rep.rtildes
    cum_w = np.cumsum(w)
    running = np.cumsum(w * r) / cum_w
    tail = running[int(0.75 * running.size):]
    tail_dev = float(np.max(np.abs(tail - thr)) / thr)
    max_running_r = np.maximum.accumulate(r)
    bounds = thr - 2.0 * float(log.losses[0]) / cum_w
    forcing_ok = bool(np.all(max_running_r >= bounds - 1e-12))
    passed = (lam0 < thr) and tail_dev <= 0.05 and forcing_ok
    return passed, {"initial_sharpness": lam0, "threshold": thr,
                    "tail_relative_deviation": tail_dev, "tolerance": 0.05,
                    "forcing_bound_everywhere": forcing_ok,
                    "onset_step": edge_metrics.eos_onset(r, eta)}


@_timed
def _check_localization():
    """Interior points realizing the averaged curvatures, with sharpness bound."""
    details = {}
    ok = True
    for name, (model, log) in _bundle().items():
        is_mlp = isinstance(model, loss_models.MlpModel)
        q_tol = 1e-6 if is_mlp else 1e-8
        total = located = lam_ok = 0
        for k in range(log.num_steps):
            if float(np.linalg.norm(log.steps[k])) < edge_metrics.DEGENERATE_STEP:
                continue
            total += 1
            try:
                rec = edge_metrics.localize(model, log, k, "tilde", tol=1e-10)
            except RuntimeError:
                continue
            if abs(rec.q_at_point - rec.target) <= q_tol:
                located += 1
                lam = edge_metrics.localized_sharpness(model, log, rec)
                if lam >= rec.target - 1e-8:
                    lam_ok += 1
        frac = located / total if total else 1.0
        details[name] = {"steps": total, "localized_fraction": frac,
                         "sharpness_bound_ok": lam_ok == located}
        ok &= frac >= 0.95 and lam_ok == located
    return ok, details


@_timed
def _check_scalar_pitchfork():
    """Continuation amplitude matches sqrt(1 - 2/eta); exponent 0.5 +- 0.02."""
    quartic = loss_models.make_scalar_poly(1.0, 0.0, -1.0)
    etas = 2.0 + np.logspace(math.log10(0.002), math.log10(0.2), 12)
    points, lost = bifurcation.branch_sweep(quartic, np.array([0.0]), etas,
                                            "continuation", u=np.array([1.0]))
    amps = np.array([p.amplitude for p in points])
    exact = np.sqrt(1.0 - 2.0 / etas)
    rel = float(np.max(np.abs(amps - exact) / exact))
    slope = bifurcation.fit_scaling_exponent(etas, amps, 2.0)
    raw_ok = all(p.raw_ok for p in points)
    passed = (not lost) and rel <= 1e-8 and abs(slope - 0.5) <= 0.02 and raw_ok
    return passed, {"amplitude_relative_error": rel, "amplitude_tolerance": 1e-8,
                    "exponent": slope, "exponent_window": 0.02,
                    "raw_orbits_verified": raw_ok}


@_timed
def _check_linear_net_normal_form():
    """Transverse spectrum, quartic coefficient, critical step size,
    width invariance, and empirical branch scaling of the linear network."""
    details = {}
    ok = True

    w_bar, geom = loss_models.balanced_minimizer(np.diag([2.0, 1.0]), 2)
    net = geom.model
    S, _ = geom.normal_basis()
    analytic = geom.transverse_spectrum()
    H_red = S.T @ net.hessian_dense(w_bar) @ S
    numeric = np.sort(dense_eigh(H_red)[0])[::-1]
    spec_err = float(np.max(np.abs(analytic - numeric)))
    details["spectrum_error"] = spec_err
    ok &= spec_err <= 1e-8

    Q = bifurcation.quartic_coefficient(net, w_bar, geom.sharp_direction(), S)
    details["quartic_u_c"] = Q
    ok &= abs(Q - (-4.0)) <= 1e-4

    eta_c, _ = bifurcation.critical_eta(net, w_bar, S)
    details["eta_c_error"] = abs(eta_c - 0.5)
    ok &= abs(eta_c - 0.5) <= 1e-10

    rng = np.random.default_rng(0)
    worst = 0.0
    for h in (2, 3, 5):
        geom_h = geom.with_width(h)
        for _ in range(100):
            xi = geom.embed(rng.standard_normal((2, 2)), None, None) * 0.3
            xi_h = loss_models.width_pad(geom, xi, h)
            lr = net.value(w_bar + xi)
            lh = geom_h.model.value(geom_h.w_bar + xi_h)
            worst = max(worst, abs(lr - lh) / max(abs(lr), 1e-30))
    details["width_invariance"] = worst
    ok &= worst <= 1e-13

    w_bar2, geom2 = _sweep_net()
    eta_c2, _ = bifurcation.critical_eta(geom2.model, w_bar2, geom2.normal_basis()[0])
    etas = eta_c2 + np.logspace(math.log10(0.005 * eta_c2),
                                math.log10(0.2 * eta_c2), 9)
    emp, _ = bifurcation.branch_sweep(geom2.model, w_bar2, etas, "empirical",
                                      u=geom2.sharp_direction(), run_steps=4000)
    slope = bifurcation.fit_scaling_exponent(etas, [p.amplitude for p in emp], eta_c2)
    details["empirical_exponent"] = slope
    ok &= abs(slope - 0.5) <= 0.05
    return ok, details


@_timed
def _check_near_periodicity():
    """Two-step return bound everywhere; MLP return ratio drops after onset."""
    details = {}
    ok = True
    for name, (model, log) in _bundle().items():
        worst = -np.inf
        for k in range(log.num_steps - 1):
            if float(np.linalg.norm(log.steps[k])) < edge_metrics.DEGENERATE_STEP:
                continue
            lhs, rhs = edge_metrics.near_periodicity_bound(log, k)
            worst = max(worst, lhs - rhs)
        details[name] = {"max_lhs_minus_rhs": worst}
        ok &= worst <= 1e-10

    _, log_m, rep = _mlp_eos_long()
    onset = edge_metrics.eos_onset(rep.rtildes, log_m.eta)
    ratios = np.array([edge_metrics.return_ratio(log_m, k)
                       for k in range(onset, log_m.num_steps - 1)])
    med = float(np.median(ratios))
    details["mlp_post_onset_median_ratio"] = med
    ok &= med < 0.3
    return ok, details


@_timed
def _check_mechanisms():
    """Recoil identity, oscillatory cancellation, propagator norm bound."""
    details = {}
    ok = True

    worst = 0.0
    for name, (model, log) in _bundle().items():
        for k in range(log.num_steps - 1):
            nd = float(np.linalg.norm(log.steps[k]))
            if nd < edge_metrics.DEGENERATE_STEP:
                continue
            inner, predicted, _ = stability_kv.recoil_check(log, k)
            scale = nd ** 2 * max(1.0, abs(predicted) / nd ** 2)
            worst = max(worst, abs(inner - predicted) / scale)
    details["recoil_relative"] = worst
    ok &= worst <= 1e-10

    rng = np.random.default_rng(7)
    viol = 0
    for _ in range(1000):
        T = int(rng.integers(1, 200))
        m = rng.uniform(-1.0, 0.0, T)
        u = rng.standard_normal(T)
        xT, bound = stability_kv.oscillatory_bound(m, u, float(rng.uniform(0.01, 2.0)))
        viol += xT > bound + 1e-12
    details["oscillatory_violations"] = int(viol)
    ok &= viol == 0

    viol = 0
    for i in range(500):
        n = int(rng.integers(2, 10))
        L = int(rng.integers(1, 12))
        eta = float(rng.uniform(0.1, 1.0))
        T = np.eye(n)
        ksum = 0.0
        for _ in range(L):
            A = rng.standard_normal((n, n))
            A = (A + A.T) / 2.0
            T = (np.eye(n) - eta * A) @ T
            ksum += stability_kv.excursion_kappa(A, eta)
        viol += stability_kv.propagator_norm(T) > math.exp(ksum) + 1e-10
    details["propagator_violations"] = int(viol)
    ok &= viol == 0

    caps_ok = True
    for name, (model, log) in _bundle().items():
        if log.diverged:
            continue
        for start, length, cap in stability_kv.supercritical_run_lengths(log):
            caps_ok &= length <= cap
    details["supercritical_runs_capped"] = bool(caps_ok)
    ok &= caps_ok
    return ok, details


@_timed
def _check_kelvin_voigt():
    """Strain recurrence residuals, propagator formula, quadratic closed form."""
    details = {}
    ok = True

    H = np.diag([3.0, 1.0])
    qa = loss_models.make_quadratic(H, np.array([0.2, -0.1]))
    qb = loss_models.make_quadratic(H, np.array([-0.3, 0.4]))
    w0 = np.array([1.0, 1.0])
    eta = 0.5
    pair = trajectory.run_pair_gd(qa, qb, w0, eta, 30)
    strain = stability_kv.strain_run(pair, qa)
    details["quadratic_recurrence_residual"] = float(strain.residual.max())
    ok &= strain.residual.max() <= 1e-10
    f = H @ (qb.center - qa.center)
    prop = np.eye(2) - eta * H
    worst_cf = 0.0
    for k in range(1, strain.num_steps + 1):
        geom_sum = sum(np.linalg.matrix_power(prop, j) for j in range(k))
        closed = -eta * geom_sum @ f
        worst_cf = max(worst_cf, float(np.linalg.norm(strain.delta[k] - closed)))
    details["quadratic_closed_form"] = worst_cf
    ok &= worst_cf <= 1e-10

    w_bar, geom = loss_models.balanced_minimizer(np.diag([2.0, 1.0]), 2)
    net_a = geom.model
    net_b = loss_models.make_two_layer_linear(np.diag([2.0, 1.0]) + 0.05, 2)
    pair_n = trajectory.run_pair_gd(net_a, net_b, w_bar + 0.05, 0.3, 30)
    strain_n = stability_kv.strain_run(pair_n, net_a)
    details["linear_net_recurrence_residual"] = float(strain_n.residual.max())
    ok &= strain_n.residual.max() <= 1e-10

    ds = loss_models.make_synthetic_dataset(3, 60, 6, 4, teacher_rank=2, noise=0.05)
    m_full = loss_models.make_mlp([6, 8, 4], "tanh", ds)
    keep = np.arange(1, ds.n)
    ds_loo = loss_models.Dataset(X=ds.X[keep], Y=ds.Y[keep], seed=ds.seed,
                                 teacher_rank=ds.teacher_rank)
    m_loo = loss_models.make_mlp([6, 8, 4], "tanh", ds_loo)
    pair_m = trajectory.run_pair_gd(m_full, m_loo, m_full.init_params(seed=7), 0.3, 40)
    strain_m = stability_kv.strain_run(pair_m, m_full, rule=uniform_rule(8),
                                       adaptive=True)
    details["mlp_recurrence_residual"] = float(strain_m.residual.max())
    ok &= strain_m.residual.max() <= 1e-6

    worst_prop = 0.0
    for s, kk in ((strain, 30), (strain_n, 30), (strain_m, 40)):
        via = stability_kv.strain_via_propagator(s, kk)
        worst_prop = max(worst_prop, float(np.linalg.norm(via - s.delta[kk]))
                         / (1.0 + float(np.linalg.norm(s.delta[kk]))))
    details["propagator_formula"] = worst_prop
    ok &= worst_prop <= 1e-10

    worst_bound = 0.0
    for s in (strain, strain_n, strain_m):
        for k in range(1, s.num_steps + 1):
            lhs = float(np.linalg.norm(s.delta[k]))
            worst_bound = max(worst_bound, lhs - stability_kv.strain_bound_rhs(s, k))
    details["strain_bound_max_excess"] = worst_bound
    ok &= worst_bound <= 1e-10
    return ok, details


@_timed
def _check_stochastic_balance():
    """Noisy telescoping identity and the zero-mean cross term."""
    details = {}
    ok = True

    q = loss_models.make_quadratic(np.diag([3.0, 1.0]), 0.0)
    worst = worst_prop = 0.0
    for seed, sigma in ((5, 0.05), (6, 0.3), (7, 0.0)):
        noise = trajectory.NoiseSource("gaussian", seed=seed, sigma=sigma)
        slog = trajectory.run_sgd(q, np.array([1.0, -1.0]), 0.5, 200, noise)
        rep = edge_metrics.sgd_balance_report(q, slog, route="quadrature")
        worst = max(worst, rep.residual)
        worst_prop = max(worst_prop, rep.max_propagator_residual)
    details["quadratic_identity_residual"] = worst
    details["propagator_residual"] = worst_prop
    ok &= worst <= 1e-9 and worst_prop <= 1e-9

    ds = loss_models.make_synthetic_dataset(9, 60, 6, 4, teacher_rank=2, noise=0.05)
    mlp = loss_models.make_mlp([6, 8, 4], "tanh", ds)
    w0 = mlp.init_params(seed=4)
    sums = np.empty(1000)
    for i in range(1000):
        noise = trajectory.NoiseSource("minibatch", seed=10_000 + i, batch_size=8)
        slog = trajectory.run_sgd(mlp, w0, 0.2, 20, noise)
        sums[i] = sum(float(slog.grads[k] @ slog.noise[k])
                      for k in range(slog.num_steps))
    mean = float(sums.mean())
    se = float(sums.std(ddof=1) / math.sqrt(sums.size))
    details["cross_term_mean"] = mean
    details["cross_term_se"] = se
    details["z_score"] = mean / se if se > 0 else 0.0
    ok &= abs(mean) <= 3.0 * se
    return ok, details


CHECKS = {
    "quadratic_exactness": _check_quadratic_exactness,
    "edge_balance_independent": _check_edge_balance_independent,
    "mlp_saturation": _check_mlp_saturation,
    "localization": _check_localization,
    "scalar_pitchfork": _check_scalar_pitchfork,
    "linear_net_normal_form": _check_linear_net_normal_form,
    "near_periodicity": _check_near_periodicity,
    "mechanisms": _check_mechanisms,
    "kelvin_voigt": _check_kelvin_voigt,
    "stochastic_balance": _check_stochastic_balance,
}

SUITES = {
    "quadratic": ["quadratic_exactness", "mechanisms", "stochastic_balance"],
    "full": list(CHECKS),
}


def run_suite(suite: str = "full", echo=None) -> list[CheckResult]:
    """Run the named suite; returns one result per check."""
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
    results = []
    for name in SUITES[suite]:
        res = CHECKS[name]()
        results.append(res)
        if echo is not None:
            echo(f"[{'PASS' if res.passed else 'FAIL'}] {res.name} "
                 f"({res.seconds:.2f}s)")
    return results
