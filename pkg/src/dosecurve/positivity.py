"""Regression-adjustment, inverse-probability-weighted and doubly robust
estimators of the dose-response curve ``m(t)`` and its derivative
``theta(t)`` when every covariate profile can receive every treatment level.

All estimators accept either one :class:`~dosecurve.nuisance.NuisanceSet`
fitted on independent data, or one set per fold together with the fold
assignment (cross-fitting); the sums then run over each fold with the
nuisances fitted on its complement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .data import EvalGrid, ObservationSet, ValidationError
from .estimates import CurveEstimate, NuisanceEvaluator, empty_window, grid_points
from .kernels import KernelSpec, as_kernel, eval_kernel, kernel_moment

def _kernel_terms(data: ObservationSet, grid: NDArray, kernel: KernelSpec, h: float):
    u = (data.t[None, :] - grid[:, None]) / h
    return u, eval_kernel(kernel, u)


def _ipw_weights(ev: NuisanceEvaluator, grid, k, variant: str, floor: float) -> NDArray:
    if variant == "sample_point":
        return k / ev.density_sample(floor)[None, :]
    if variant == "query_point":
        return k / ev.density_query(grid, floor)
    raise ValidationError(f"unknown weight point {variant!r}")


def _normaliser(w: NDArray, n: int, h: float, self_normalized: bool):
    """Per-grid divisor ``S_g``: ``n h`` or the weight total ``sum_j W_gj``."""
    if self_normalized:
        return w.sum(axis=1)
    return np.full(w.shape[0], n * h)


def _finish(
    grid: EvalGrid,
    est: NDArray,
    var: NDArray,
    w: NDArray,
    method: str,
    h: float,
    n: int,
    rate_power: int,
    tau: float,
    self_normalized: bool,
    strict: bool,
) -> CurveEstimate:
    n_eff = np.count_nonzero(w, axis=1)
    flagged = n_eff == 0
    if self_normalized:
        empty_window(strict, grid.points, flagged)
        est = np.where(flagged, 0.0, est)
        var = np.where(flagged, np.nan, var)
    return CurveEstimate(grid, est, var, n_eff, method, h, n, rate_power, tau, flagged=flagged)


def _weighted_part(w: NDArray, resid: NDArray, scale: NDArray) -> NDArray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return (w * resid).sum(axis=1) / scale


# ---------------------------------------------------------------------------
# m(t)
# ---------------------------------------------------------------------------


def m_ra(data: ObservationSet, nuisance, grid, folds=None, tau: float = 0.05) -> CurveEstimate:
    """Average of ``mu(t, S_i)`` over the sample."""
    grid = grid_points(grid)
    mu = NuisanceEvaluator(data, nuisance, folds).outcome_grid("mu", grid.points)
    est = mu.mean(axis=1)
    var = ((mu - est[:, None]) ** 2).mean(axis=1)
    n_eff = np.full(len(grid), data.n)
    return CurveEstimate(grid, est, var, n_eff, "m_ra", 1.0, data.n, 0, tau)


def m_ipw(
    data: ObservationSet,
    nuisance,
    kernel: KernelSpec | str,
    h: float,
    grid,
    variant: str = "sample_point",
    self_normalized: bool = False,
    folds=None,
    density_floor: float = 0.001,
    tau: float = 0.05,
    strict: bool = True,
) -> CurveEstimate:
    """Kernel-localised IPW estimate of ``m(t)``.

    ``variant="sample_point"`` weights by ``1 / p(T_i | S_i)``,
    ``"query_point"`` by ``1 / p(t | S_i)``.
    """
    return m_dr(
        data, nuisance, kernel, h, grid, self_normalized, folds, density_floor, tau, strict,
        variant=variant, _zero_outcome=True,
    )


def m_dr(
    data: ObservationSet,
    nuisance,
    kernel: KernelSpec | str,
    h: float,
    grid,
    self_normalized: bool = False,
    folds=None,
    density_floor: float = 0.001,
    tau: float = 0.05,
    strict: bool = True,
    *,
    variant: str = "sample_point",
    _zero_outcome: bool = False,
) -> CurveEstimate:
    """Doubly robust estimate of ``m(t)``: weighted residuals plus the RA term.

    The self-normalised form divides only the residual part by the weight
    total.
    """
    grid = grid_points(grid)
    kernel = as_kernel(kernel)
    ev = NuisanceEvaluator(data, nuisance, folds)
    n, t = data.n, grid.points
    _, k = _kernel_terms(data, t, kernel, h)
    w = _ipw_weights(ev, t, k, variant, density_floor)
    scale = _normaliser(w, n, h, self_normalized)
    if _zero_outcome:
        resid = np.broadcast_to(data.y, w.shape)
        est = _weighted_part(w, resid, scale)
        ra = np.zeros_like(w)
    else:
        ra = ev.outcome_grid("mu", t)
        resid = data.y[None, :] - ra
        est = _weighted_part(w, resid, scale) + ra.mean(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = w * resid / np.sqrt(h)
        infl = (n * h / scale)[:, None] * phi + np.sqrt(h) * (ra - est[:, None])
    var = (infl**2).mean(axis=1)
    method = "m_ipw" if _zero_outcome else "m_dr"
    return _finish(grid, est, var, w, method, h, n, 1, tau, self_normalized, strict)


# ---------------------------------------------------------------------------
# theta(t)
# ---------------------------------------------------------------------------


def theta_ra(data: ObservationSet, nuisance, grid, folds=None, tau: float = 0.05) -> CurveEstimate:
    """Average of ``beta(t, S_i)`` over the sample."""
    grid = grid_points(grid)
    beta = NuisanceEvaluator(data, nuisance, folds).outcome_grid("beta", grid.points)
    est = beta.mean(axis=1)
    var = ((beta - est[:, None]) ** 2).mean(axis=1)
    n_eff = np.full(len(grid), data.n)
    return CurveEstimate(grid, est, var, n_eff, "theta_ra", 1.0, data.n, 0, tau)


def theta_ipw(
    data: ObservationSet,
    nuisance,
    kernel: KernelSpec | str,
    h: float,
    grid,
    variant: str = "sample_point",
    self_normalized: bool = False,
    folds=None,
    density_floor: float = 0.001,
    tau: float = 0.05,
    strict: bool = True,
) -> CurveEstimate:
    """IPW derivative estimator built on the kernel's first-moment weights.

    The query-point variant is inconsistent for ``theta`` and is provided only
    to measure that bias.
    """
    return _theta_dr_core(
        data, nuisance, kernel, h, grid, "ipw", self_normalized, folds, density_floor, tau,
        strict, variant,
    )


def theta_dr(
    data: ObservationSet,
    nuisance,
    kernel: KernelSpec | str,
    h: float,
    grid,
    form: str = "local_poly",
    self_normalized: bool = False,
    folds=None,
    density_floor: float = 0.001,
    tau: float = 0.05,
    strict: bool = True,
) -> CurveEstimate:
    """Doubly robust estimate of ``theta(t)`` with its variance.

    ``form="local_poly"`` uses the residual ``Y - mu(t,S) - (T-t) beta(t,S)``;
    ``form="eif"`` uses ``Y - mu(T,S)``. Density weights are always taken at
    the sample points.
    """
    if form not in ("local_poly", "eif"):
        raise ValidationError(f"unknown DR form {form!r}")
    return _theta_dr_core(
        data, nuisance, kernel, h, grid, form, self_normalized, folds, density_floor, tau,
        strict, "sample_point",
    )


def _theta_dr_core(
    data, nuisance, kernel, h, grid, form, self_normalized, folds, density_floor, tau, strict,
    variant,
):
    grid = grid_points(grid)
    parts = theta_components(data, nuisance, kernel, h, grid, form, folds, density_floor, variant)
    est, var = _theta_sums(
        parts.w, parts.u, parts.resid, parts.beta, data.n, h, parts.kappa2, self_normalized
    )
    method = "theta_ipw" if form == "ipw" else ("theta_dr" if form == "local_poly" else "theta_dr_eif")
    return _finish(grid, est, var, parts.w, method, h, data.n, 3, tau, self_normalized, strict)


@dataclass(frozen=True, eq=False)
class ThetaComponents:
    """Per-grid, per-observation pieces of a kernel derivative estimator.

    The estimate at ``t_g`` is ``sum_i u W r / (kappa2 h S_g) + ra_g`` where
    ``S_g`` is ``n h`` or ``sum_i W``.
    """

    u: NDArray
    w: NDArray
    resid: NDArray
    beta: NDArray
    kappa2: float


def theta_components(
    data, nuisance, kernel, h, grid, form="local_poly", folds=None, density_floor=0.001,
    variant="sample_point",
) -> ThetaComponents:
    grid = grid_points(grid)
    kernel = as_kernel(kernel)
    ev = NuisanceEvaluator(data, nuisance, folds)
    t = grid.points
    u, k = _kernel_terms(data, t, kernel, h)
    w = _ipw_weights(ev, t, k, variant, density_floor)
    resid, beta = _theta_residuals(ev, data, t, u, h, form)
    return ThetaComponents(u, w, resid, beta, kernel_moment(kernel, 2))


def _theta_residuals(ev, data, t, u, h, form):
    if form == "ipw":
        return np.broadcast_to(data.y, u.shape), np.zeros(u.shape)
    beta = ev.outcome_grid("beta", t)
    if form == "local_poly":
        mu = ev.outcome_grid("mu", t)
        return data.y[None, :] - mu - (u * h) * beta, beta
    return np.broadcast_to(data.y - ev.outcome_at_sample(), u.shape), beta


def _theta_sums(w, u, resid, beta, n, h, kappa2, self_normalized, ra=None):
    """Point estimate and plug-in variance shared by every theta estimator.

    ``ra`` overrides the regression-adjustment term, which otherwise is the
    sample mean of ``beta``. The variance centring term is ``beta_i - est``
    in the first case and ``ra - est`` in the second.
    """
    scale = _normaliser(w, n, h, self_normalized)
    center = beta if ra is None else ra[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        ipw_part = (u * w * resid).sum(axis=1) / (kappa2 * h * scale)
        est = ipw_part + (beta.mean(axis=1) if ra is None else ra)
        phi = u * w * resid / (np.sqrt(h) * kappa2)
        infl = (n * h / scale)[:, None] * phi + h**1.5 * (center - est[:, None])
    var = (infl**2).mean(axis=1)
    return est, var


def variance_theta_dr(
    data: ObservationSet,
    nuisance,
    kernel: KernelSpec | str,
    h: float,
    t: float,
    theta_hat: float,
    self_normalized: bool = False,
    form: str = "local_poly",
    folds=None,
    density_floor: float = 0.001,
) -> float:
    """Sample second moment of the DR influence terms at a single ``t``."""
    kernel = as_kernel(kernel)
    ev = NuisanceEvaluator(data, nuisance, folds)
    grid = np.array([float(t)])
    u, k = _kernel_terms(data, grid, kernel, h)
    w = k / ev.density_sample(density_floor)[None, :]
    resid, beta = _theta_residuals(ev, data, grid, u, h, form)
    scale = _normaliser(w, data.n, h, self_normalized)
    phi = u * w * resid / (np.sqrt(h) * kernel_moment(kernel, 2))
    infl = (data.n * h / scale)[:, None] * phi + h**1.5 * (beta - theta_hat)
    return float((infl**2).mean())


def ipw_variant_bias_diag(
    data: ObservationSet, nuisance, kernel: KernelSpec | str, h: float, t: float,
    density_floor: float = 0.001,
) -> float:
    """Query-point minus sample-point IPW estimate of ``theta(t)``.

    Its limit is ``E[mu(t,S) d/dt log p(t|S)]``, which is generally non-zero.
    """
    q = theta_ipw(data, nuisance, kernel, h, [t], "query_point", density_floor=density_floor, strict=False)
    s = theta_ipw(data, nuisance, kernel, h, [t], "sample_point", density_floor=density_floor, strict=False)
    return float(q.estimate[0] - s.estimate[0])
