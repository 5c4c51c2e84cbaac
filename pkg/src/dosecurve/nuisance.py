"""Nuisance functions consumed by the curve estimators.

Outcome regression ``mu(t, s)`` and its treatment derivative ``beta(t, s)`` come
from one polynomial ridge fit, so ``beta`` is the exact derivative of ``mu``.
Conditional treatment densities are estimated either by a KDE of residuals from
a treatment-on-covariate regression, or by regressing kernel-smoothed
treatment indicators on the covariates. The joint ``(t, s)`` density is a
product-kernel KDE and also supplies ``p(s | t)`` and the level-set trimmed
interior density.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .data import EmptyWindowError, EstimationError, ObservationSet, ValidationError, validate
from .kernels import (
    DegenerateBandwidthError,
    KernelSpec,
    as_kernel,
    bandwidth_rule,
    eval_kernel,
)

_CHUNK = 2048


class SingularFitError(EstimationError):
    """Least-squares design is rank deficient and no ridge penalty was given."""


class EmptyLevelSetError(EstimationError):
    """Every conditional-density value at the query point is zero."""


def apply_density_floor(values: ArrayLike, floor: float = 0.001) -> NDArray:
    """Raise every density value below ``floor`` up to ``floor``."""
    if not floor > 0:
        raise ValidationError("density floor must be positive")
    return np.maximum(np.asarray(values, dtype=float), floor)


def _rowdot(x: NDArray, coef: NDArray) -> NDArray:
    # per-row reduction keeps each row's result independent of how many rows
    # are evaluated together (needed for bitwise fold equivalence)
    return (x * coef).sum(axis=1)


# ---------------------------------------------------------------------------
# outcome regression
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BasisConfig:
    """Polynomial basis ``[1, t..t^p, s_j..s_j^q, t*s_j (optional)]``."""

    t_degree: int = 2
    s_degree: int = 1
    interactions: bool = False

    def __post_init__(self) -> None:
        if self.t_degree < 0 or self.s_degree < 0:
            raise ValidationError("basis degrees must be non-negative")

    def n_columns(self, d: int) -> int:
        return 1 + self.t_degree + d * self.s_degree + (d if self.interactions else 0)


def design_matrix(basis: BasisConfig, t: ArrayLike, s: ArrayLike) -> NDArray:
    t = np.asarray(t, dtype=float)
    s = _as_2d(s)
    cols = [np.ones_like(t)]
    cols += [t**k for k in range(1, basis.t_degree + 1)]
    for k in range(1, basis.s_degree + 1):
        cols += [s[:, j] ** k for j in range(s.shape[1])]
    if basis.interactions:
        cols += [t * s[:, j] for j in range(s.shape[1])]
    return np.column_stack(cols)


def design_matrix_dt(basis: BasisConfig, t: ArrayLike, s: ArrayLike) -> NDArray:
    """Column-wise derivative of :func:`design_matrix` with respect to ``t``."""
    t = np.asarray(t, dtype=float)
    s = _as_2d(s)
    zero = np.zeros_like(t)
    cols = [zero]
    cols += [k * t ** (k - 1) for k in range(1, basis.t_degree + 1)]
    cols += [zero] * (basis.s_degree * s.shape[1])
    if basis.interactions:
        cols += [s[:, j] + zero for j in range(s.shape[1])]
    return np.column_stack(cols)


class Outcome(Protocol):
    def mu(self, t: ArrayLike, s: ArrayLike) -> NDArray: ...

    def beta(self, t: ArrayLike, s: ArrayLike) -> NDArray: ...


def _broadcast_t(t: ArrayLike, s: NDArray) -> NDArray:
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        return np.full(s.shape[0], float(t))
    return t


def _as_2d(s: ArrayLike) -> NDArray:
    s = np.asarray(s, dtype=float)
    return s[:, None] if s.ndim == 1 else s


@dataclass(frozen=True, eq=False)
class OutcomeModel:
    basis: BasisConfig
    coef: NDArray
    ridge: float = 0.0

    def mu(self, t: ArrayLike, s: ArrayLike) -> NDArray:
        s = _as_2d(s)
        return _rowdot(design_matrix(self.basis, _broadcast_t(t, s), s), self.coef)

    def beta(self, t: ArrayLike, s: ArrayLike) -> NDArray:
        s = _as_2d(s)
        return _rowdot(design_matrix_dt(self.basis, _broadcast_t(t, s), s), self.coef)


@dataclass(frozen=True, eq=False)
class FunctionOutcome:
    """Outcome nuisance given by known functions (oracle or fixed)."""

    mu_fn: Callable[[NDArray, NDArray], NDArray]
    beta_fn: Callable[[NDArray, NDArray], NDArray]

    def mu(self, t: ArrayLike, s: ArrayLike) -> NDArray:
        s = _as_2d(s)
        return np.asarray(self.mu_fn(_broadcast_t(t, s), s), dtype=float) + np.zeros(s.shape[0])

    def beta(self, t: ArrayLike, s: ArrayLike) -> NDArray:
        s = _as_2d(s)
        return np.asarray(self.beta_fn(_broadcast_t(t, s), s), dtype=float) + np.zeros(s.shape[0])


def zero_outcome() -> FunctionOutcome:
    return FunctionOutcome(lambda t, s: np.zeros(s.shape[0]), lambda t, s: np.zeros(s.shape[0]))


def eval_mu(model: Outcome, t: ArrayLike, s: ArrayLike) -> NDArray:
    return model.mu(t, s)


def eval_beta(model: Outcome, t: ArrayLike, s: ArrayLike) -> NDArray:
    return model.beta(t, s)


def _ridge_solve(x: NDArray, y: NDArray, lam: float) -> NDArray:
    p = x.shape[1]
    if lam == 0:
        coef, _, rank, _ = np.linalg.lstsq(x, y, rcond=None)
        if rank < p:
            raise SingularFitError(f"design has rank {rank} < {p} columns and no ridge penalty")
        return coef
    if lam < 0:
        raise ValidationError("ridge penalty must be non-negative")
    pen = np.full(p, lam)
    pen[0] = 0.0  # intercept unpenalised
    return np.linalg.solve(x.T @ x + np.diag(pen), x.T @ y)


def fit_outcome_regression(
    train: ObservationSet, basis: BasisConfig = BasisConfig(), ridge: float = 0.0
) -> OutcomeModel:
    """Least-squares (``ridge == 0``) or ridge fit of ``Y`` on the basis."""
    x = design_matrix(basis, train.t, train.s)
    coef = _ridge_solve(x, train.y, ridge)
    if not np.all(np.isfinite(coef)):
        raise SingularFitError("fit produced non-finite coefficients")
    coef.setflags(write=False)
    return OutcomeModel(basis, coef, ridge)


# ---------------------------------------------------------------------------
# conditional density of T given S
# ---------------------------------------------------------------------------


class CondDensity(Protocol):
    def density(self, t: ArrayLike, s: ArrayLike) -> NDArray:
        """``p(t_k | s_k)`` for paired rows."""
        ...


@dataclass(frozen=True, eq=False)
class CovariateRegression:
    """Ridge regression of the treatment on a polynomial in the covariates."""

    s_degree: int
    coef: NDArray

    def predict(self, s: ArrayLike) -> NDArray:
        s = _as_2d(s)
        basis = BasisConfig(t_degree=0, s_degree=self.s_degree)
        return _rowdot(design_matrix(basis, np.zeros(s.shape[0]), s), self.coef)


def fit_covariate_regression(
    s: NDArray, target: NDArray, s_degree: int = 1, ridge: float = 0.0
) -> CovariateRegression:
    basis = BasisConfig(t_degree=0, s_degree=s_degree)
    x = design_matrix(basis, np.zeros(s.shape[0]), s)
    return CovariateRegression(s_degree, _ridge_solve(x, target, ridge))


@dataclass(frozen=True, eq=False)
class ResidualKDEDensity:
    """KDE of residuals ``T - g(S)`` shifted to the query covariate."""

    regressor: CovariateRegression
    residuals: NDArray
    kernel: KernelSpec
    h: float
    method: str = "kde_residual"

    def density(self, t: ArrayLike, s: ArrayLike) -> NDArray:
        s = _as_2d(s)
        z = _broadcast_t(t, s) - self.regressor.predict(s)
        out = np.empty(z.shape[0])
        for lo in range(0, z.shape[0], _CHUNK):
            u = (z[lo : lo + _CHUNK, None] - self.residuals[None, :]) / self.h
            out[lo : lo + _CHUNK] = eval_kernel(self.kernel, u).mean(axis=1) / self.h
        return out


@dataclass(frozen=True, eq=False)
class RKSDensity:
    """Regression of ``K_r((T - t)/h_r) / h_r`` on the covariates, for any ``t``.

    The ridge smoother matrix is fixed by the covariates, so the regression at
    a new ``t`` only needs the smoothed responses. Negative fits are clamped
    to zero.
    """

    s_degree: int
    smoother: NDArray  # (p, n_train)
    t_train: NDArray
    kernel: KernelSpec
    h: float
    method: str = "rks"

    def density(self, t: ArrayLike, s: ArrayLike) -> NDArray:
        s = _as_2d(s)
        t = _broadcast_t(t, s)
        basis = BasisConfig(t_degree=0, s_degree=self.s_degree)
        xq = design_matrix(basis, np.zeros(s.shape[0]), s)
        out = np.empty(t.shape[0])
        for lo in range(0, t.shape[0], _CHUNK):
            tq = t[lo : lo + _CHUNK]
            resp = eval_kernel(self.kernel, (self.t_train[:, None] - tq[None, :]) / self.h) / self.h
            coef = self.smoother @ resp  # (p, m)
            out[lo : lo + _CHUNK] = (xq[lo : lo + _CHUNK] * coef.T).sum(axis=1)
        return np.maximum(out, 0.0)


@dataclass(frozen=True, eq=False)
class FunctionDensity:
    """Known conditional density (oracle truth, or a deliberately wrong one)."""

    fn: Callable[[NDArray, NDArray], NDArray]
    method: str = "oracle"

    def density(self, t: ArrayLike, s: ArrayLike) -> NDArray:
        s = _as_2d(s)
        return np.asarray(self.fn(_broadcast_t(t, s), s), dtype=float) + np.zeros(s.shape[0])


def constant_density(c: float = 1.0) -> FunctionDensity:
    return FunctionDensity(lambda t, s: np.full(s.shape[0], c), method="constant")


def fit_cond_density(
    train: ObservationSet,
    method: str = "kde_residual",
    kernel: KernelSpec | str | None = None,
    bandwidth: str | float = "silverman",
    s_degree: int = 1,
    ridge: float = 1e-8,
) -> ResidualKDEDensity | RKSDensity:
    """Fit ``p(t | s)`` by residual KDE (``kde_residual``) or RKS (``rks``).

    ``bandwidth`` is a rule name understood by :func:`bandwidth_rule` or a
    positive number. Defaults follow the usual choices: Epanechnikov kernel
    for residual KDE, Gaussian for RKS, Silverman bandwidth for both.
    """
    if method == "kde_residual":
        k = as_kernel(kernel or "epanechnikov")
        reg = fit_covariate_regression(train.s, train.t, s_degree, ridge)
        resid = train.t - reg.predict(train.s)
        h = _resolve_bw(resid, bandwidth)
        resid.setflags(write=False)
        return ResidualKDEDensity(reg, resid, k, h)
    if method == "rks":
        k = as_kernel(kernel or "gaussian")
        h = _resolve_bw(train.t, bandwidth)
        basis = BasisConfig(t_degree=0, s_degree=s_degree)
        x = design_matrix(basis, np.zeros(train.n), train.s)
        pen = np.full(x.shape[1], ridge)
        pen[0] = 0.0
        smoother = np.linalg.solve(x.T @ x + np.diag(pen), x.T)
        return RKSDensity(s_degree, smoother, train.t.copy(), k, h)
    raise ValidationError(f"unknown conditional density method {method!r}")


def _resolve_bw(x: NDArray, bandwidth: str | float) -> float:
    if isinstance(bandwidth, str):
        return bandwidth_rule(x, bandwidth).h
    if not bandwidth > 0:
        raise ValidationError("bandwidth must be positive")
    return float(bandwidth)


# ---------------------------------------------------------------------------
# joint density of (T, S) and derived densities
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class JointDensityModel:
    """Product-kernel KDE over ``(t, s)`` with per-dimension bandwidths."""

    t_train: NDArray
    s_train: NDArray
    kernel: KernelSpec
    h_t: float
    h_s: NDArray

    @property
    def n(self) -> int:
        return self.t_train.shape[0]

    def kt_matrix(self, t: ArrayLike) -> NDArray:
        """``K_h(t_g - T_j)`` for every query ``t_g`` and training ``T_j``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return eval_kernel(self.kernel, (t[:, None] - self.t_train[None, :]) / self.h_t) / self.h_t

    def ks_matrix(self, s: ArrayLike) -> NDArray:
        """Product kernel ``prod_k K_h(s_ik - S_jk)`` for query rows ``s_i``."""
        s = _as_2d(s)
        out = np.ones((s.shape[0], self.n))
        for k in range(s.shape[1]):
            h = self.h_s[k]
            out *= eval_kernel(self.kernel, (s[:, k, None] - self.s_train[None, :, k]) / h) / h
        return out

    def p_t(self, t: ArrayLike) -> NDArray:
        return self.kt_matrix(t).mean(axis=1)

    def p_s(self, s: ArrayLike) -> NDArray:
        return self.ks_matrix(s).mean(axis=1)

    def joint(self, t: ArrayLike, s: ArrayLike) -> NDArray:
        """``p(t_k, s_k)`` for paired rows."""
        s = _as_2d(s)
        t = _broadcast_t(t, s)
        out = np.empty(t.shape[0])
        for lo in range(0, t.shape[0], _CHUNK):
            kt = self.kt_matrix(t[lo : lo + _CHUNK])
            out[lo : lo + _CHUNK] = (kt * self.ks_matrix(s[lo : lo + _CHUNK])).mean(axis=1)
        return out

    def joint_grid(self, t: ArrayLike, s: ArrayLike) -> NDArray:
        """``p(t_g, s_i)`` on the outer product of queries, shape ``(G, m)``."""
        return self.kt_matrix(t) @ self.ks_matrix(s).T / self.n

    def cond_s_given_t(self, s: ArrayLike, t: ArrayLike) -> NDArray:
        """``p(s_i | t_g) = p(t_g, s_i) / p_T(t_g)``, shape ``(G, m)``."""
        kt = self.kt_matrix(t)
        pt = kt.mean(axis=1)
        joint = kt @ self.ks_matrix(s).T / self.n
        with np.errstate(divide="ignore", invalid="ignore"):
            out = joint / pt[:, None]
        return np.where(pt[:, None] > 0, out, 0.0)


def fit_joint_density(train: ObservationSet, kernel: KernelSpec | str = "gaussian") -> JointDensityModel:
    """Product KDE with a Silverman bandwidth in every dimension."""
    if train.n < 2:
        raise ValidationError("need at least two observations")
    k = as_kernel(kernel)
    h_t = bandwidth_rule(train.t, "silverman").h
    h_s = np.array([bandwidth_rule(train.s[:, j], "silverman").h for j in range(train.d)])
    h_s.setflags(write=False)
    return JointDensityModel(train.t.copy(), train.s.copy(), k, h_t, h_s)


@dataclass(frozen=True, eq=False)
class InteriorDensity:
    """``p(s | t)`` restricted to its upper level set ``{p(s | t) >= zeta}``.

    ``norm`` is the importance-sampling estimate of the retained mass, with
    the marginal covariate KDE as proposal.
    """

    joint: JointDensityModel
    t: float
    zeta: float
    norm: float
    multiplier: float

    def __call__(self, s: ArrayLike) -> NDArray:
        cond = self.joint.cond_s_given_t(s, [self.t])[0]
        return np.where(cond >= self.zeta, cond, 0.0) / self.norm


@dataclass(frozen=True, eq=False)
class InteriorWeights:
    """Interior densities for several query treatments at once.

    ``values[g, i]`` is the trimmed, renormalised ``p(s_i | t_g)``; rows whose
    level set is empty on the reference sample have ``valid[g] = False`` and
    all-zero values.
    """

    values: NDArray
    zeta: NDArray
    norm: NDArray
    valid: NDArray


def interior_weights(
    joint: JointDensityModel,
    t: ArrayLike,
    s_eval: ArrayLike,
    reference: Optional[ObservationSet] = None,
    multiplier: float = 0.5,
) -> InteriorWeights:
    """Level-set interior density at every ``t_g``, evaluated at ``s_eval``.

    The threshold is ``multiplier * max_j p(S_j | t_g)`` and the normaliser
    ``mean_j p(S_j | t_g) 1{>= zeta} / p_S(S_j)``, both over the reference
    sample (the joint model's training sample when ``reference`` is None).
    """
    if not multiplier > 0:
        raise ValidationError("level-set multiplier must be positive")
    t = np.atleast_1d(np.asarray(t, dtype=float))
    ref_s = joint.s_train if reference is None else reference.s
    cond_ref = joint.cond_s_given_t(ref_s, t)  # (G, n_ref)
    zeta = multiplier * cond_ref.max(axis=1)
    valid = zeta > 0
    ps_ref = joint.p_s(ref_s)
    keep = cond_ref >= zeta[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        norm = np.where(keep, cond_ref / ps_ref[None, :], 0.0).mean(axis=1)
    valid &= norm > 0
    cond_eval = joint.cond_s_given_t(s_eval, t)
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = np.where(cond_eval >= zeta[:, None], cond_eval, 0.0) / norm[:, None]
    vals = np.where(valid[:, None], vals, 0.0)
    return InteriorWeights(vals, zeta, np.where(valid, norm, np.nan), valid)


def interior_density(
    joint: JointDensityModel,
    t: float,
    data: Optional[ObservationSet] = None,
    multiplier: float = 0.5,
) -> InteriorDensity:
    """Interior conditional density at a single treatment value ``t``."""
    ref = data if data is not None else None
    w = interior_weights(joint, [t], np.zeros((1, joint.s_train.shape[1])), ref, multiplier)
    if not w.valid[0]:
        raise EmptyLevelSetError(f"conditional covariate density vanishes at t={t}")
    return InteriorDensity(joint, float(t), float(w.zeta[0]), float(w.norm[0]), multiplier)


# ---------------------------------------------------------------------------
# conditional CDF of S given T
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CondCdfWeights:
    t: float
    weights: NDArray


def cond_cdf_weight_matrix(
    t_obs: NDArray, grid: ArrayLike, kernel: KernelSpec | str, h: float
) -> tuple[NDArray, NDArray]:
    """Nadaraya-Watson weights for each grid point; returns ``(W, mass)``.

    Rows with zero kernel mass are left all-zero.
    """
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    k = eval_kernel(as_kernel(kernel), (t_obs[None, :] - grid[:, None]) / h)
    mass = k.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(mass[:, None] > 0, k / mass[:, None], 0.0)
    return w, mass


def cond_cdf_weights(data: ObservationSet, t: float, kernel: KernelSpec | str, h: float) -> CondCdfWeights:
    """Kernel weights ``K((T_i - t)/h) / sum_j K((T_j - t)/h)``."""
    w, mass = cond_cdf_weight_matrix(data.t, [t], kernel, h)
    if not mass[0] > 0:
        raise EmptyWindowError(f"no treatment value within the kernel window of t={t}")
    return CondCdfWeights(float(t), w[0])


# ---------------------------------------------------------------------------
# bundles
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NuisanceSet:
    outcome: Outcome
    cond_density: Optional[CondDensity] = None
    joint: Optional[JointDensityModel] = None
    train: Optional[ObservationSet] = None
    tag: str = "full"


@dataclass(frozen=True)
class NuisanceFitter:
    """Recipe that turns a training sample into a :class:`NuisanceSet`.

    ``outcome`` is ``"poly"``, ``"zero"`` or ``"oracle"``; ``density`` is
    ``"kde_residual"``, ``"rks"``, ``"oracle"``, ``"constant"`` or ``"none"``.
    Oracle choices use the supplied callables and ignore the data.
    """

    outcome: str = "poly"
    basis: BasisConfig = BasisConfig()
    ridge: float = 0.0
    density: str = "kde_residual"
    density_s_degree: int = 1
    density_kernel: Optional[str] = None
    density_constant: float = 1.0
    joint: bool = False
    joint_kernel: str = "gaussian"
    oracle_mu: Optional[Callable] = field(default=None, compare=False)
    oracle_beta: Optional[Callable] = field(default=None, compare=False)
    oracle_density: Optional[Callable] = field(default=None, compare=False)

    def fit(self, train: ObservationSet, tag: str = "full") -> NuisanceSet:
        validate(train)
        if self.outcome == "poly":
            out: Outcome = fit_outcome_regression(train, self.basis, self.ridge)
        elif self.outcome == "zero":
            out = zero_outcome()
        elif self.outcome == "oracle":
            if self.oracle_mu is None or self.oracle_beta is None:
                raise ValidationError("oracle outcome requested without oracle functions")
            out = FunctionOutcome(self.oracle_mu, self.oracle_beta)
        else:
            raise ValidationError(f"unknown outcome nuisance {self.outcome!r}")

        dens: Optional[CondDensity]
        if self.density in ("kde_residual", "rks"):
            dens = fit_cond_density(
                train, self.density, self.density_kernel, "silverman", self.density_s_degree
            )
        elif self.density == "oracle":
            if self.oracle_density is None:
                raise ValidationError("oracle density requested without a density function")
            dens = FunctionDensity(self.oracle_density)
        elif self.density == "constant":
            dens = constant_density(self.density_constant)
        elif self.density == "none":
            dens = None
        else:
            raise ValidationError(f"unknown density nuisance {self.density!r}")

        joint = fit_joint_density(train, self.joint_kernel) if self.joint else None
        return NuisanceSet(out, dens, joint, train, tag)


__all__ = [
    "BasisConfig",
    "CondCdfWeights",
    "DegenerateBandwidthError",
    "EmptyLevelSetError",
    "FunctionDensity",
    "FunctionOutcome",
    "InteriorDensity",
    "InteriorWeights",
    "JointDensityModel",
    "NuisanceFitter",
    "NuisanceSet",
    "OutcomeModel",
    "RKSDensity",
    "ResidualKDEDensity",
    "SingularFitError",
    "apply_density_floor",
    "cond_cdf_weight_matrix",
    "cond_cdf_weights",
    "constant_density",
    "eval_beta",
    "eval_mu",
    "fit_cond_density",
    "fit_joint_density",
    "fit_outcome_regression",
    "interior_density",
    "interior_weights",
    "zero_outcome",
]
