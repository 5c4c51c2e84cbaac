"""Estimators of ``theta(t)`` and ``m(t)`` when positivity fails but the outcome
is additive in treatment and covariates, ``Y = m(T) + eta(S) + noise``.

The IPW and DR forms reweight by ``p_zeta(S | t) / p(T, S)``, where
``p_zeta`` is the conditional covariate density at the query treatment
restricted to its high-density level set. Curves of ``m`` follow by
integrating a ``theta`` curve from each observed treatment to ``t``.
"""

from __future__ import annotations

import warnings

import numpy as np
from numpy.typing import NDArray
from scipy.integrate import cumulative_trapezoid

from .data import EstimationError, EvalGrid, ObservationSet, ValidationError
from .estimates import CurveEstimate, NuisanceEvaluator, empty_window, grid_points
from .kernels import KernelSpec, as_kernel, eval_kernel, kernel_moment
from .nuisance import cond_cdf_weight_matrix
from .positivity import ThetaComponents, _finish, _theta_sums


class CoverageError(EstimationError):
    """The integration grid does not span the treatments and query points."""


def theta_c_ra(
    data: ObservationSet,
    nuisance,
    kernel: KernelSpec | str,
    h: float,
    grid,
    folds=None,
    tau: float = 0.05,
    strict: bool = True,
) -> CurveEstimate:
    """Kernel-weighted average of ``beta(t, S_i)`` over observations near ``t``.

    The variance reported is ``n h sum_i w_i^2 (beta_i - est)^2``, i.e. the
    sampling variance of the weighted average with ``beta`` held fixed.
    """
    grid = grid_points(grid)
    t = grid.points
    w, mass = cond_cdf_weight_matrix(data.t, t, kernel, h)
    flagged = ~(mass > 0)
    empty_window(strict, t, flagged)
    beta = NuisanceEvaluator(data, nuisance, folds).outcome_grid("beta", t)
    est = (w * beta).sum(axis=1)
    var = data.n * h * (w**2 * (beta - est[:, None]) ** 2).sum(axis=1)
    var = np.where(flagged, np.nan, var)
    n_eff = np.count_nonzero(w, axis=1)
    return CurveEstimate(grid, est, var, n_eff, "theta_c_ra", h, data.n, 1, tau, flagged=flagged)


def interior_components(
    data: ObservationSet,
    nuisance,
    kernel: KernelSpec | str,
    h: float,
    grid,
    multiplier: float = 0.5,
    outcome: bool = True,
    folds=None,
    density_floor: float = 0.001,
) -> tuple[ThetaComponents, NDArray, NDArray]:
    """Pieces of the interior-weighted estimators.

    Returns the per-observation terms, the regression-adjustment integral
    ``int beta(t, s) p_zeta(s | t) ds`` for every grid point (zeros when
    ``outcome`` is False) and the validity mask of the level sets.
    """
    grid = grid_points(grid)
    kernel = as_kernel(kernel)
    t = grid.points
    ev = NuisanceEvaluator(data, nuisance, folds)
    u = (data.t[None, :] - t[:, None]) / h
    k = eval_kernel(kernel, u)
    pz, valid = ev.interior(t, multiplier)
    w = k * pz / ev.joint_sample(density_floor)[None, :]
    if outcome:
        mu = ev.outcome_grid("mu", t)
        beta = ev.outcome_grid("beta", t)
        resid = data.y[None, :] - mu - (u * h) * beta
        # self-normalised importance average with the covariate KDE as proposal
        iw = pz / ev.marginal_s()[None, :]
        tot = iw.sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            ra = np.where(tot > 0, (beta * iw).sum(axis=1) / tot, 0.0)
    else:
        resid = np.broadcast_to(data.y, u.shape)
        beta = np.zeros(u.shape)
        ra = np.zeros(t.size)
    return ThetaComponents(u, w, resid, beta, kernel_moment(kernel, 2)), ra, valid


def _interior_estimate(
    data, nuisance, kernel, h, grid, multiplier, self_normalized, folds, density_floor, tau,
    strict, outcome,
) -> CurveEstimate:
    grid = grid_points(grid)
    parts, ra, valid = interior_components(
        data, nuisance, kernel, h, grid, multiplier, outcome, folds, density_floor
    )
    if strict and not np.all(valid):
        from .nuisance import EmptyLevelSetError

        raise EmptyLevelSetError("conditional covariate density vanishes at some grid points")
    est, var = _theta_sums(
        parts.w, parts.u, parts.resid, parts.beta, data.n, h, parts.kappa2, self_normalized, ra=ra
    )
    method = "theta_c_dr" if outcome else "theta_c_ipw"
    curve = _finish(grid, est, var, parts.w, method, h, data.n, 3, tau, self_normalized, strict)
    if np.all(valid):
        return curve
    bad = ~valid
    return CurveEstimate(
        grid,
        np.where(bad, 0.0, curve.estimate),
        np.where(bad, np.nan, curve.variance),
        np.where(bad, 0, curve.n_effective),
        method, h, data.n, 3, tau,
        flagged=curve.flagged | bad,
    )


def theta_c_ipw(
    data: ObservationSet,
    nuisance,
    kernel: KernelSpec | str,
    h: float,
    grid,
    multiplier: float = 0.5,
    self_normalized: bool = False,
    folds=None,
    density_floor: float = 0.001,
    tau: float = 0.05,
    strict: bool = True,
) -> CurveEstimate:
    """Bias-corrected IPW derivative estimator.

    Weights are ``K((T_i - t)/h) p_zeta(S_i | t) / p(T_i, S_i)`` with the
    interior density taken at the query treatment ``t``.
    """
    return _interior_estimate(
        data, nuisance, kernel, h, grid, multiplier, self_normalized, folds, density_floor, tau,
        strict, outcome=False,
    )


def theta_c_dr(
    data: ObservationSet,
    nuisance,
    kernel: KernelSpec | str,
    h: float,
    grid,
    multiplier: float = 0.5,
    self_normalized: bool = False,
    folds=None,
    density_floor: float = 0.001,
    tau: float = 0.05,
    strict: bool = True,
) -> CurveEstimate:
    """Bias-corrected DR derivative estimator with its plug-in variance."""
    return _interior_estimate(
        data, nuisance, kernel, h, grid, multiplier, self_normalized, folds, density_floor, tau,
        strict, outcome=True,
    )


def variance_theta_c_dr(
    data: ObservationSet,
    nuisance,
    kernel: KernelSpec | str,
    h: float,
    t: float,
    theta_hat: float,
    multiplier: float = 0.5,
    self_normalized: bool = False,
    folds=None,
    density_floor: float = 0.001,
) -> float:
    """Plug-in variance of the bias-corrected DR estimator at one ``t``."""
    parts, ra, _ = interior_components(
        data, nuisance, kernel, h, [t], multiplier, True, folds, density_floor
    )
    n = data.n
    scale = parts.w.sum(axis=1) if self_normalized else np.full(1, n * h)
    phi = parts.u * parts.w * parts.resid / (np.sqrt(h) * parts.kappa2)
    infl = (n * h / scale)[:, None] * phi + h**1.5 * (ra[:, None] - theta_hat)
    return float((infl**2).mean())


# ---------------------------------------------------------------------------
# integral estimators of m(t)
# ---------------------------------------------------------------------------


def fine_grid(data: ObservationSet, grid, size: int = 400) -> EvalGrid:
    """Uniform grid spanning both the observed treatments and the queries."""
    g = grid_points(grid).points
    lo = min(float(data.t.min()), float(g[0]))
    hi = max(float(data.t.max()), float(g[-1]))
    if not hi > lo:
        raise ValidationError("treatment range is degenerate")
    return EvalGrid(np.linspace(lo, hi, size))


def integrate_theta(theta_curve: CurveEstimate, data: ObservationSet, grid) -> CurveEstimate:
    """``m(t) = mean_i [Y_i + int_{T_i}^t theta]`` from a ``theta`` curve.

    The curve must be evaluated on a grid covering every ``T_i`` and every
    query point; the antiderivative is the cumulative trapezoid rule with
    linear interpolation in between. No variance is attached (NaN).
    """
    grid = grid_points(grid)
    x = theta_curve.t
    need_lo = min(float(data.t.min()), float(grid.points[0]))
    need_hi = max(float(data.t.max()), float(grid.points[-1]))
    if x[0] > need_lo or x[-1] < need_hi:
        raise CoverageError(
            f"theta curve spans [{x[0]:g}, {x[-1]:g}] but [{need_lo:g}, {need_hi:g}] is required"
        )
    if x.size > 1:
        step = (x[-1] - x[0]) / (x.size - 1)
        gaps = np.diff(np.sort(data.t))
        if gaps.size and gaps.max() > 5 * step:
            warnings.warn(
                "observed treatments have a gap wider than 5 grid steps; the treatment "
                "support may not be connected",
                RuntimeWarning,
                stacklevel=2,
            )
    anti = cumulative_trapezoid(theta_curve.estimate, x, initial=0.0)
    at_obs = np.interp(data.t, x, anti)
    at_t = np.interp(grid.points, x, anti)
    est = data.y.mean() + at_t - at_obs.mean()
    g = len(grid)
    return CurveEstimate(
        grid, est, np.full(g, np.nan), np.full(g, data.n), f"m_c[{theta_curve.method}]",
        theta_curve.h, data.n, 0, theta_curve.ci_level,
    )


def m_c(
    data: ObservationSet,
    nuisance,
    kernel: KernelSpec | str,
    h: float,
    grid,
    estimator: str = "dr",
    multiplier: float = 0.5,
    self_normalized: bool = False,
    folds=None,
    density_floor: float = 0.001,
    fine_size: int = 400,
) -> CurveEstimate:
    """Integral RA/IPW/DR estimator of ``m(t)`` without positivity."""
    fine = fine_grid(data, grid, fine_size)
    if estimator == "ra":
        curve = theta_c_ra(data, nuisance, kernel, h, fine, folds, strict=False)
    elif estimator == "ipw":
        curve = theta_c_ipw(
            data, nuisance, kernel, h, fine, multiplier, self_normalized, folds, density_floor,
            strict=False,
        )
    elif estimator == "dr":
        curve = theta_c_dr(
            data, nuisance, kernel, h, fine, multiplier, self_normalized, folds, density_floor,
            strict=False,
        )
    else:
        raise ValidationError(f"unknown integral estimator {estimator!r}")
    return integrate_theta(curve, data, grid)
