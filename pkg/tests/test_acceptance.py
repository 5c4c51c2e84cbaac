"""End-to-end acceptance checks, one test per criterion.

Each test prints ``CRITERION k ... PASS|FAIL`` and the same lines are
repeated in the terminal summary. Run on their own with::

    pytest tests/test_acceptance.py -v -s
"""

import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm

from conftest import ACCEPTANCE_LINES
from dosecurve.cli import main
from dosecurve.crossfit import (
    crossfit_curve,
    fit_nuisances,
    make_folds,
    multiplier_bootstrap_band,
    prepare_fitter,
    resolve_bandwidth,
    run_estimator,
)
from dosecurve.data import EvalGrid, ObservationSet
from dosecurve.kernels import kernel_moment, kernel_moment_quad
from dosecurve.nopositivity import fine_grid, integrate_theta, theta_c_dr, theta_c_ipw
from dosecurve.nuisance import (
    BasisConfig,
    FunctionDensity,
    FunctionOutcome,
    NuisanceFitter,
    NuisanceSet,
    eval_beta,
    eval_mu,
    fit_outcome_regression,
    zero_outcome,
)
from dosecurve.estimates import CurveEstimate
from dosecurve.positivity import ipw_variant_bias_diag, m_dr, m_ipw, theta_components, theta_dr, theta_ipw
from dosecurve.simulation import DgpSpec, EstimatorSpec, dgp1_oracles, gen_dgp1, gen_dgp2, preset, run_monte_carlo

pytestmark = pytest.mark.acceptance

Q95 = 1.959964
GAP = "ignore:observed treatments have a gap"


def record(num: int, title: str, ok: bool, detail: str) -> None:
    line = f"CRITERION {num:2d} {title}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES[num] = line
    print(line)
    assert ok, line


def test_c01_kernel_exactness():
    want = {
        ("epanechnikov", 1, False): 0.0,
        ("epanechnikov", 2, False): 0.2,
        ("epanechnikov", 4, False): 3 / 35,
        ("epanechnikov", 0, True): 0.6,
        ("gaussian", 2, False): 1.0,
    }
    errs = []
    for (kind, j, sq), value in want.items():
        errs.append(abs(kernel_moment(kind, j, sq) - value))
        errs.append(abs(kernel_moment_quad(kind, j, sq) - value))
    worst = max(errs)
    record(1, "kernel exactness", worst <= 1e-12, f"max error {worst:.2e} <= 1e-12")


def test_c02_derivative_fidelity():
    rng = np.random.default_rng(2)
    configs = [BasisConfig(1, 1, False), BasisConfig(2, 1, True), BasisConfig(3, 1, False),
               BasisConfig(3, 2, True), BasisConfig(4, 3, True)]
    sim = gen_dgp1(2000, 3, 0)
    worst = 0.0
    step = 1e-6
    for basis in configs:
        model = fit_outcome_regression(sim.data, basis)
        t = rng.uniform(-2, 2, 100)
        s = rng.normal(size=(100, 3))
        b = eval_beta(model, t, s)
        fd = (eval_mu(model, t + step, s) - eval_mu(model, t - step, s)) / (2 * step)
        worst = max(worst, float(np.max(np.abs(fd - b) / np.abs(b))))
    record(2, "derivative fidelity", worst <= 1e-6, f"max relative error {worst:.2e} <= 1e-6")


def test_c03_algebraic_identities():
    sim = gen_dgp1(600, 3, 4)
    data = sim.data
    cfg, fit = preset("dgp1")
    h = resolve_bandwidth(data, cfg)
    grid = EvalGrid.linspace(-1.5, 1.5, 31)
    dens = fit.fit(data).cond_density
    zero = NuisanceSet(zero_outcome(), dens)
    checks = {}
    for sn in (False, True):
        a = theta_dr(data, zero, "epanechnikov", h, grid, self_normalized=sn)
        b = theta_ipw(data, zero, "epanechnikov", h, grid, self_normalized=sn)
        checks[f"theta_dr=theta_ipw sn={sn}"] = np.array_equal(a.estimate, b.estimate)
        a = m_dr(data, zero, "epanechnikov", h, grid, self_normalized=sn)
        b = m_ipw(data, zero, "epanechnikov", h, grid, self_normalized=sn)
        checks[f"m_dr=m_ipw sn={sn}"] = np.array_equal(a.estimate, b.estimate)

    d2 = gen_dgp2(600, 4).data
    cfg2, fit2 = preset("dgp2")
    h2 = resolve_bandwidth(d2, cfg2)
    joint = prepare_fitter("theta_c_dr", replace(fit2, outcome="zero")).fit(d2)
    g2 = EvalGrid.linspace(-0.8, 0.8, 9)
    for sn in (False, True):
        a = theta_c_dr(d2, joint, "epanechnikov", h2, g2, self_normalized=sn, strict=False)
        b = theta_c_ipw(d2, joint, "epanechnikov", h2, g2, self_normalized=sn, strict=False)
        checks[f"theta_c_dr=theta_c_ipw sn={sn}"] = np.array_equal(a.estimate, b.estimate)

    for tag, d, c, f, g in [("theta_dr", data, cfg, fit, grid), ("m_dr", data, cfg, fit, grid),
                            ("theta_c_dr", d2, cfg2, fit2, g2)]:
        c1 = c.evolve(folds=1, strict=False)
        hh = resolve_bandwidth(d, c1)
        a = crossfit_curve(d, c1, tag, g, f)
        b = run_estimator(tag, d, prepare_fitter(tag, f).fit(d), c1, hh, g)
        checks[f"L=1 {tag}"] = np.array_equal(a.estimate, b.estimate) and np.array_equal(
            a.variance, b.variance, equal_nan=True
        )
    bad = [k for k, v in checks.items() if not v]
    record(3, "algebraic identities", not bad, f"{len(checks) - len(bad)}/{len(checks)} bitwise; failed {bad}")


def test_c04_residual_annihilation():
    rng = np.random.default_rng(4)
    n = 800
    s = rng.normal(size=(n, 2))
    t = 0.4 * s[:, 0] + rng.normal(size=n)
    slope = 1.7
    y = 0.3 + slope * t + s @ np.array([0.8, -1.1])
    mu = lambda tt, ss: 0.3 + slope * tt + ss @ np.array([0.8, -1.1])
    beta = lambda tt, ss: np.full(np.shape(ss)[0], slope)
    ns = NuisanceSet(FunctionOutcome(mu, beta), FunctionDensity(lambda tt, ss: norm.pdf(tt - 0.4 * ss[:, 0])))
    data = ObservationSet(y, t, s)
    grid = EvalGrid.linspace(-2, 2, 41)
    worst = 0.0
    for h in (0.05, 0.2, 0.5, 1.0, 3.0):
        for sn in (False, True):
            est = theta_dr(data, ns, "epanechnikov", h, grid, self_normalized=sn, strict=False)
            ok = ~est.flagged
            worst = max(worst, float(np.max(np.abs(est.estimate[ok] - slope))))
    record(4, "residual annihilation", worst <= 1e-10, f"max |theta_dr - slope| {worst:.2e} <= 1e-10")


def test_c05_self_normalization_law():
    cfg, _ = preset("dgp1")
    dgp = DgpSpec("dgp1", 5000, 5, seed=505)
    density, mu, beta = dgp1_oracles(5)
    ns = NuisanceSet(FunctionOutcome(mu, beta), FunctionDensity(density))
    denoms = []
    for r in range(200):
        data = dgp.draw(r).data
        h = resolve_bandwidth(data, cfg)
        parts = theta_components(data, ns, cfg.kernel, h, [0.0])
        denoms.append(parts.w.sum() / (data.n * h))
    mean = float(np.mean(denoms))
    se = float(np.std(denoms, ddof=1) / math.sqrt(len(denoms)))
    record(5, "self-normalization law", abs(mean - 1) <= 0.05,
           f"mean denominator {mean:.4f} (MC se {se:.4f}), |mean - 1| <= 0.05")


def test_c06_positivity_regime():
    cfg, _ = preset("dgp1")
    fit = NuisanceFitter(outcome="poly", basis=BasisConfig(2, 1, True), density="oracle")
    grid = EvalGrid.default()
    rep = run_monte_carlo(DgpSpec("dgp1", 1000, 5, seed=606), [EstimatorSpec("theta_dr", fit)],
                          cfg, grid, 200)[0]
    inner = np.abs(grid.points) <= 1 + 1e-12
    mean_bias = float(np.mean(np.abs(rep.bias[inner])))
    in_band = (rep.coverage >= 0.88) & (rep.coverage <= 0.99)
    frac = float(in_band.mean())
    ok = mean_bias <= 0.15 and frac >= 0.9 and rep.n_failed == 0
    record(6, "positivity-regime estimation", ok,
           f"mean |bias| on [-1,1] {mean_bias:.3f} <= 0.15; coverage in [0.88,0.99] at "
           f"{frac:.0%} of 81 points >= 90%; coverage range [{rep.coverage.min():.3f}, {rep.coverage.max():.3f}]")


def test_c07_double_robustness():
    cfg, _ = preset("dgp1")
    g = EvalGrid([0.0])
    zero = NuisanceFitter(outcome="zero", density="oracle")
    small = run_monte_carlo(DgpSpec("dgp1", 500, 5, seed=701), [EstimatorSpec("theta_dr", zero)], cfg, g, 200)[0]
    large = run_monte_carlo(DgpSpec("dgp1", 2000, 5, seed=702), [EstimatorSpec("theta_dr", zero)], cfg, g, 200)[0]
    b_small, b_large = abs(small.bias[0]), abs(large.bias[0])
    band = 2 * math.hypot(small.bias_se()[0], large.bias_se()[0])
    shrink = b_large <= b_small + band

    wrong = NuisanceFitter(outcome="poly", basis=BasisConfig(2, 1, True), density="constant")
    dr, ipw = run_monte_carlo(DgpSpec("dgp1", 2000, 5, seed=703),
                              [EstimatorSpec("theta_dr", wrong), EstimatorSpec("theta_ipw", wrong)], cfg, g, 200)
    b_dr, b_ipw = abs(dr.bias[0]), abs(ipw.bias[0])
    record(7, "double robustness", shrink and b_dr <= b_ipw,
           f"zero outcome, oracle density: |bias| {b_small:.3f} (n=500) -> {b_large:.3f} (n=2000), "
           f"allowed {b_small + band:.3f}; constant density n=2000: |bias| DR {b_dr:.3f} <= IPW {b_ipw:.3f}")


def test_c08_no_positivity_correction():
    cfg, fit = preset("dgp2")
    orc = replace(fit, density="oracle")
    ests = [EstimatorSpec("theta_ipw", orc, "theta_ipw_oracle"), EstimatorSpec("theta_c_ipw", fit),
            EstimatorSpec("theta_c_dr", fit)]
    ipw, c_ipw, c_dr = run_monte_carlo(DgpSpec("dgp2", 2000, seed=808), ests, cfg, EvalGrid([0.0]), 200)
    b_ipw, b_c = abs(ipw.bias[0]), abs(c_ipw.bias[0])
    cov = float(c_dr.coverage[0])
    ok = b_c < b_ipw and cov >= 0.85
    record(8, "no-positivity bias correction", ok,
           f"|bias| theta_c_ipw(0) {b_c:.3f} < theta_ipw(0) {b_ipw:.3f}; theta_c_dr coverage {cov:.3f} >= 0.85; "
           f"theta_c_dr bias {c_dr.bias[0]:.3f}, failed reps {c_dr.n_failed}")


def test_c09_ipw_variant_diagnostic():
    rng = np.random.default_rng(9)
    n = 20_000
    s = rng.normal(size=n)
    t = s + rng.normal(size=n)
    data = ObservationSet(t, t, s)
    ns = NuisanceSet(FunctionOutcome(lambda tt, ss: tt + 0 * ss[:, 0], lambda tt, ss: 1 + 0 * tt),
                     FunctionDensity(lambda tt, ss: norm.pdf(tt - ss[:, 0])))
    h = 1.25 * t.std(ddof=1) * n ** (-0.2)

    def limit(t0):
        # mu(t, s) = t and d/dt log p(t|s) = -(t - s), averaged over S ~ N(0, 1)
        return integrate.quad(lambda v: t0 * (-(t0 - v)) * norm.pdf(v), -np.inf, np.inf)[0]

    diag = ipw_variant_bias_diag(data, ns, "epanechnikov", h, 0.0)
    target = limit(0.0)
    extra = ", ".join(f"t={x}: {ipw_variant_bias_diag(data, ns, 'epanechnikov', h, x):.3f} vs {limit(x):.3f}"
                      for x in (0.5, 1.0))
    record(9, "IPW-variant bias diagnostic", abs(diag - target) <= 0.1,
           f"t=0: {diag:.4f} vs quadrature {target:.4f}, tolerance 0.1; for reference {extra}")


@pytest.mark.filterwarnings(GAP)
def test_c10_integral_consistency():
    sim = gen_dgp1(2000, 2, 10)
    data = sim.data
    grid = EvalGrid.linspace(-1.5, 1.5, 13)
    fine = fine_grid(data, grid)
    x = fine.points
    n_fine = len(x)
    theta = np.sin(2 * x) + 0.3 * x**2

    def curve(values, g):
        k = len(g)
        return CurveEstimate(g, values, np.zeros(k), np.full(k, data.n), "theta", 1.0, data.n, 3)

    fine_out = integrate_theta(curve(theta, fine), data, fine)
    delta = float(np.diff(x).max())
    d2 = np.abs(-4 * np.sin(2 * x) + 0.6).max()
    bound = 2 * (2 * delta) ** 2 / 12 * d2
    deriv = (fine_out.estimate[2:] - fine_out.estimate[:-2]) / (x[2:] - x[:-2])
    err_deriv = float(np.max(np.abs(deriv - theta[1:-1])))

    c = 0.7
    const = integrate_theta(curve(np.full(n_fine, c), fine), data, grid)
    want = data.y.mean() + c * (grid.points - data.t.mean())
    err_const = float(np.max(np.abs(const.estimate - want)))
    ok = err_deriv <= bound and err_const <= 1e-10 and n_fine == 400
    record(10, "integral consistency", ok,
           f"derivative error {err_deriv:.2e} <= 2x trapezoid bound {bound:.2e} on {n_fine} points; "
           f"constant-theta error {err_const:.1e} <= 1e-10")


def test_c11_bootstrap_dominance():
    cfg, fit = preset("dgp1")
    dgp = DgpSpec("dgp1", 1000, 5, seed=1111)
    grid = EvalGrid.default()
    quantiles = []
    zero_width = True
    for r in range(50):
        data = dgp.draw(r).data
        folds = make_folds(data.n, cfg.folds, dgp.seed, key=(r,))
        ns = fit_nuisances(data, fit, folds)
        band = multiplier_bootstrap_band(data, ns, cfg, grid, 500, tau=0.05, folds=folds, key=(r,))
        quantiles.append(band.quantile)
        if r < 5:
            flat = multiplier_bootstrap_band(data, ns, cfg, grid, 10, folds=folds, law="degenerate")
            inc = flat.included
            zero_width &= bool(flat.quantile == 0.0 and np.all(flat.half_width[inc] == 0.0)
                               and np.array_equal(flat.upper[inc], flat.lower[inc]))
    q = np.array(quantiles)
    frac = float(np.mean(q >= Q95))
    record(11, "bootstrap dominance", frac >= 0.9 and zero_width,
           f"Q >= 1.959964 in {frac:.0%} of 50 replications (median Q {np.median(q):.3f}); "
           f"degenerate multipliers zero width: {zero_width}")


@pytest.mark.filterwarnings(GAP)
def test_c12_determinism(tmp_path):
    runs = [
        ["--dgp", "dgp1", "--n", "400", "--d", "5", "--reps", "16",
         "--estimators", "theta_dr,theta_ipw,m_dr,theta_ra,m_c_dr", "--grid=-2:2:21"],
        ["--dgp", "dgp2", "--n", "400", "--reps", "12", "--estimators", "theta_c_dr,theta_c_ipw,theta_c_ra",
         "--grid=-1:1:9", "--format", "json"],
    ]
    identical = True
    for i, args in enumerate(runs):
        blobs = []
        for w in (1, 4, 8):
            out = tmp_path / f"run{i}_w{w}.out"
            code = main(["simulate", *args, "--seed", "12", "--workers", str(w), "--out", str(out)])
            assert code == 0
            blobs.append(out.read_bytes())
        identical &= blobs[0] == blobs[1] == blobs[2]
    record(12, "determinism", identical, "simulate output byte-identical across 1, 4 and 8 workers for both designs")
