import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.stats import gaussian_kde
from sklearn.linear_model import Ridge

from dosecurve.data import EmptyWindowError, ObservationSet, ValidationError
from dosecurve.kernels import eval_kernel
from dosecurve.nuisance import (
    BasisConfig,
    EmptyLevelSetError,
    NuisanceFitter,
    SingularFitError,
    apply_density_floor,
    cond_cdf_weights,
    design_matrix,
    eval_beta,
    eval_mu,
    fit_cond_density,
    fit_joint_density,
    fit_outcome_regression,
    interior_density,
    interior_weights,
    zero_outcome,
)

BASES = [
    BasisConfig(1, 1, False),
    BasisConfig(2, 1, True),
    BasisConfig(3, 2, False),
    BasisConfig(3, 1, True),
]


def _poly_data(n=200, d=2, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=(n, d))
    t = 0.5 * s[:, 0] + rng.normal(size=n)
    y = 1.0 - 0.5 * t + 0.3 * t**2 + s @ np.arange(1.0, d + 1) + 0.7 * t * s[:, 0]
    return ObservationSet(y + noise * rng.normal(size=n), t, s)


class TestOutcomeRegression:
    def test_recovers_exact_polynomial(self):
        data = _poly_data()
        model = fit_outcome_regression(data, BasisConfig(2, 1, True))
        # columns: 1, t, t^2, s1, s2, t*s1, t*s2
        np.testing.assert_allclose(model.coef, [1.0, -0.5, 0.3, 1.0, 2.0, 0.7, 0.0], atol=1e-10)
        t0 = np.full(5, 0.4)
        s0 = data.s[:5]
        np.testing.assert_allclose(eval_beta(model, t0, s0), -0.5 + 0.6 * 0.4 + 0.7 * s0[:, 0], atol=1e-10)

    def test_scalar_t_broadcasts(self):
        data = _poly_data()
        model = fit_outcome_regression(data, BasisConfig(2, 1, True))
        np.testing.assert_array_equal(model.mu(0.3, data.s), model.mu(np.full(data.n, 0.3), data.s))

    def test_ridge_matches_sklearn(self):
        data = _poly_data(noise=1.0, seed=3)
        basis = BasisConfig(2, 2, True)
        model = fit_outcome_regression(data, basis, ridge=2.5)
        x = design_matrix(basis, data.t, data.s)[:, 1:]
        ref = Ridge(alpha=2.5, fit_intercept=True, solver="cholesky").fit(x, data.y)
        np.testing.assert_allclose(model.coef[0], ref.intercept_, rtol=1e-8)
        np.testing.assert_allclose(model.coef[1:], ref.coef_, rtol=1e-7, atol=1e-10)

    def test_singular_design_without_ridge(self):
        s = np.ones((20, 1))
        data = ObservationSet(np.arange(20.0), np.linspace(0, 1, 20), s)
        with pytest.raises(SingularFitError):
            fit_outcome_regression(data, BasisConfig(1, 1))
        fit_outcome_regression(data, BasisConfig(1, 1), ridge=1e-3)

    def test_zero_outcome(self):
        out = zero_outcome()
        s = np.ones((4, 2))
        assert np.all(out.mu(0.2, s) == 0) and np.all(out.beta(0.2, s) == 0)


@pytest.mark.parametrize("basis", BASES)
def test_beta_is_derivative_of_mu(basis):
    data = _poly_data(noise=0.5, seed=11)
    model = fit_outcome_regression(data, basis)
    rng = np.random.default_rng(5)
    t = rng.uniform(-2, 2, 100)
    s = rng.normal(size=(100, 2))
    step = 1e-5
    fd = (eval_mu(model, t + step, s) - eval_mu(model, t - step, s)) / (2 * step)
    b = eval_beta(model, t, s)
    rel = np.abs(fd - b) / np.maximum(np.abs(b), 1.0)
    assert rel.max() <= 1e-6


def test_density_floor():
    v = apply_density_floor([0.0, 0.0005, 0.001, 0.2], 0.001)
    np.testing.assert_array_equal(v, [0.001, 0.001, 0.001, 0.2])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=30), st.floats(1e-6, 1.0))
def test_density_floor_property(vals, floor):
    out = apply_density_floor(np.array(vals), floor)
    assert np.all(out >= floor)
    np.testing.assert_array_equal(out[np.array(vals) >= floor], np.array(vals)[np.array(vals) >= floor])


def _gauss_data(n=400, seed=0):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=(n, 1))
    t = s[:, 0] + rng.normal(size=n)
    return ObservationSet(t + s[:, 0], t, s)


class TestCondDensity:
    def test_residual_kde_by_hand(self):
        data = _gauss_data(50)
        cd = fit_cond_density(data, "kde_residual", "gaussian", bandwidth=0.4)
        x = np.column_stack([np.ones(50), data.s[:, 0]])
        coef = np.linalg.lstsq(x, data.t, rcond=None)[0]
        resid = data.t - x @ coef
        t0, s0 = 0.3, -0.2
        z = t0 - (coef[0] + coef[1] * s0)
        want = np.mean(np.exp(-0.5 * ((z - resid) / 0.4) ** 2) / np.sqrt(2 * np.pi)) / 0.4
        assert cd.density([t0], [[s0]])[0] == pytest.approx(want, rel=1e-6)

    @pytest.mark.parametrize("method", ["kde_residual", "rks"])
    def test_integrates_to_about_one(self, method):
        data = _gauss_data(800)
        cd = fit_cond_density(data, method)
        mass = integrate.quad(lambda t: cd.density([t], [[0.3]])[0], -8, 8, points=[0.3], limit=400)[0]
        assert mass == pytest.approx(1.0, abs=0.03)

    # RKS regresses smoothed indicators on a polynomial in s; the target is
    # Gaussian in s, so a quartic is needed for a close fit
    @pytest.mark.parametrize("method,degree", [("kde_residual", 1), ("rks", 4)])
    def test_close_to_truth(self, method, degree):
        data = _gauss_data(3000, seed=1)
        cd = fit_cond_density(data, method, s_degree=degree)
        t = np.linspace(-1.5, 1.5, 7)
        s = np.full((7, 1), 0.2)
        truth = np.exp(-0.5 * (t - 0.2) ** 2) / np.sqrt(2 * np.pi)
        np.testing.assert_allclose(cd.density(t, s), truth, atol=0.05)

    def test_rks_matches_direct_regression(self):
        data = _gauss_data(60, seed=4)
        cd = fit_cond_density(data, "rks", "gaussian", bandwidth=0.5, s_degree=2, ridge=0.0)
        t0 = 0.7
        resp = eval_kernel("gaussian", (data.t - t0) / 0.5) / 0.5
        x = np.column_stack([np.ones(60), data.s[:, 0], data.s[:, 0] ** 2])
        coef = np.linalg.lstsq(x, resp, rcond=None)[0]
        sq = np.array([[-0.5], [0.1], [1.2]])
        want = np.maximum(coef[0] + coef[1] * sq[:, 0] + coef[2] * sq[:, 0] ** 2, 0)
        np.testing.assert_allclose(cd.density(np.full(3, t0), sq), want, rtol=1e-8, atol=1e-12)

    def test_unknown_method(self):
        with pytest.raises(ValidationError):
            fit_cond_density(_gauss_data(20), "lasso")


class TestJointDensity:
    def test_marginal_matches_scipy_kde(self):
        data = _gauss_data(300)
        joint = fit_joint_density(data, "gaussian")
        ref = gaussian_kde(data.t, bw_method=joint.h_t / data.t.std(ddof=1))
        q = np.linspace(-3, 3, 9)
        np.testing.assert_allclose(joint.p_t(q), ref(q), rtol=1e-10)

    def test_joint_integrates_to_one(self):
        data = _gauss_data(200)
        joint = fit_joint_density(data, "gaussian")
        val = integrate.dblquad(
            lambda s, t: joint.joint([t], [[s]])[0], -9, 9, -9, 9, epsabs=1e-6
        )[0]
        assert val == pytest.approx(1.0, abs=1e-4)

    def test_conditional_integrates_to_one(self):
        data = _gauss_data(300)
        joint = fit_joint_density(data, "gaussian")
        mass = integrate.quad(lambda s: joint.cond_s_given_t([[s]], [0.4])[0, 0], -9, 9)[0]
        assert mass == pytest.approx(1.0, abs=1e-8)

    def test_joint_grid_agrees_with_paired(self):
        data = _gauss_data(100)
        joint = fit_joint_density(data, "epanechnikov")
        s = data.s[:4]
        grid = joint.joint_grid([0.1], s)[0]
        np.testing.assert_allclose(grid, joint.joint(np.full(4, 0.1), s), rtol=1e-12)


class TestInterior:
    def test_trimmed_values(self):
        data = _gauss_data(300)
        joint = fit_joint_density(data, "gaussian")
        w = interior_weights(joint, [0.0], data.s, multiplier=0.5)
        cond = joint.cond_s_given_t(data.s, [0.0])[0]
        zeta = 0.5 * cond.max()
        assert w.zeta[0] == pytest.approx(zeta)
        keep = cond >= zeta
        ps = joint.p_s(data.s)
        norm = np.mean(np.where(keep, cond / ps, 0.0))
        np.testing.assert_allclose(w.values[0], np.where(keep, cond, 0) / norm, rtol=1e-12)

    def test_interior_density_normalised(self):
        data = _gauss_data(2000, seed=2)
        joint = fit_joint_density(data, "gaussian")
        dens = interior_density(joint, 0.2, data, multiplier=0.3)
        mass = integrate.quad(lambda s: dens([[s]])[0], -6, 6, points=[0.1], limit=400)[0]
        assert mass == pytest.approx(1.0, abs=0.1)

    @settings(max_examples=15, deadline=None)
    @given(st.floats(0.05, 0.9), st.floats(0.0, 0.5))
    def test_more_trimming_never_adds_points(self, m1, gap):
        data = _gauss_data(150, seed=9)
        joint = fit_joint_density(data, "gaussian")
        lo = interior_weights(joint, [0.3], data.s, multiplier=m1)
        hi = interior_weights(joint, [0.3], data.s, multiplier=m1 + gap)
        assert np.count_nonzero(hi.values) <= np.count_nonzero(lo.values)

    def test_empty_level_set(self):
        data = _gauss_data(100)
        joint = fit_joint_density(data, "epanechnikov")
        with pytest.raises(EmptyLevelSetError):
            interior_density(joint, 50.0, data)


class TestCondCdfWeights:
    def test_sum_to_one_and_convex(self):
        data = _gauss_data(100)
        w = cond_cdf_weights(data, 0.2, "epanechnikov", 0.5)
        assert w.weights.sum() == pytest.approx(1.0, abs=1e-14)
        assert np.all(w.weights >= 0)

    def test_two_point_window(self):
        data = ObservationSet([0, 0, 0], [-0.1, 0.1, 5.0], [[1.0], [3.0], [0.0]])
        w = cond_cdf_weights(data, 0.0, "uniform", 0.5)
        np.testing.assert_allclose(w.weights, [0.5, 0.5, 0.0])

    def test_empty_window(self):
        data = ObservationSet([0, 0], [0.0, 0.1], [[1.0], [3.0]])
        with pytest.raises(EmptyWindowError):
            cond_cdf_weights(data, 4.0, "epanechnikov", 0.5)


class TestFitter:
    def test_oracle_ignores_data(self):
        f = NuisanceFitter(
            outcome="oracle", density="oracle",
            oracle_mu=lambda t, s: t + s[:, 0], oracle_beta=lambda t, s: np.ones_like(t),
            oracle_density=lambda t, s: np.full(s.shape[0], 0.25),
        )
        a = f.fit(_gauss_data(30, 0))
        b = f.fit(_gauss_data(30, 1))
        s = np.ones((3, 1))
        np.testing.assert_array_equal(a.outcome.mu(0.5, s), b.outcome.mu(0.5, s))
        np.testing.assert_array_equal(a.cond_density.density(0.5, s), [0.25] * 3)

    def test_joint_on_request(self):
        ns = NuisanceFitter(joint=True).fit(_gauss_data(50))
        assert ns.joint is not None and ns.train is not None

    @pytest.mark.parametrize("kw", [{"outcome": "forest"}, {"density": "nn"}, {"outcome": "oracle"}])
    def test_rejects(self, kw):
        with pytest.raises(ValidationError):
            NuisanceFitter(**kw).fit(_gauss_data(50))
