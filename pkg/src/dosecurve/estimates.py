"""Curve containers, Wald intervals and fold-aware nuisance evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.stats import norm

from .data import EmptyWindowError, EvalGrid, ObservationSet, ValidationError
from .nuisance import NuisanceSet, apply_density_floor


@dataclass(frozen=True)
class PointEstimate:
    value: float
    variance: float
    n_effective: int


@dataclass(frozen=True, eq=False)
class CurveEstimate:
    """Estimates of ``m(t)`` or ``theta(t)`` over an evaluation grid.

    ``variance`` is on the scale of ``sqrt(n * h**rate_power)``: 3 for
    kernel estimators of ``theta``, 1 for kernel estimators of ``m`` and
    kernel-weighted averages, 0 for plain sample averages. ``flagged`` marks
    grid points with no usable kernel mass; their interval bounds are NaN.
    """

    grid: EvalGrid
    estimate: NDArray
    variance: NDArray
    n_effective: NDArray
    method: str
    h: float
    n: int
    rate_power: int
    ci_level: float = 0.05
    ci_lower: NDArray = field(default=None)
    ci_upper: NDArray = field(default=None)
    flagged: NDArray = field(default=None)
    band_quantile: Optional[float] = None

    def __post_init__(self) -> None:
        g = len(self.grid)
        for name in ("estimate", "variance", "n_effective"):
            if np.shape(getattr(self, name)) != (g,):
                raise ValidationError(f"{name} is not conformal with the grid")
        if self.flagged is None:
            object.__setattr__(self, "flagged", np.zeros(g, dtype=bool))
        if self.ci_lower is None or self.ci_upper is None:
            lo, hi = pointwise_ci(
                self.estimate, self.variance, self.n, self.h, self.ci_level, self.rate_power
            )
            lo = np.where(self.flagged, np.nan, lo)
            hi = np.where(self.flagged, np.nan, hi)
            object.__setattr__(self, "ci_lower", lo)
            object.__setattr__(self, "ci_upper", hi)

    @property
    def t(self) -> NDArray:
        return self.grid.points

    @property
    def points(self) -> list[PointEstimate]:
        return [
            PointEstimate(float(v), float(s), int(k))
            for v, s, k in zip(self.estimate, self.variance, self.n_effective)
        ]

    def standard_error(self) -> NDArray:
        return np.sqrt(self.variance / (self.n * self.h**self.rate_power))

    def with_band(self, quantile: float) -> "CurveEstimate":
        return replace(self, band_quantile=float(quantile))

    def band(self) -> tuple[NDArray, NDArray]:
        if self.band_quantile is None:
            raise ValidationError("curve carries no uniform-band quantile")
        half = self.band_quantile * self.standard_error()
        return self.estimate - half, self.estimate + half


def normal_quantile(tau: float) -> float:
    """``q_{1 - tau/2}`` of the standard normal."""
    if not 0 < tau < 1:
        raise ValidationError("tau must lie in (0, 1)")
    return float(norm.ppf(1.0 - tau / 2.0))


def pointwise_ci(
    estimate, variance, n: int, h: float, tau: float = 0.05, rate_power: int = 3
) -> tuple[NDArray, NDArray]:
    """Symmetric Wald interval ``estimate +- q * sqrt(variance / (n h^p))``."""
    est = np.asarray(estimate, dtype=float)
    var = np.asarray(variance, dtype=float)
    if np.any(var < 0):
        raise ValidationError("variance must be non-negative")
    half = normal_quantile(tau) * np.sqrt(var / (n * h**rate_power))
    return est - half, est + half


# ---------------------------------------------------------------------------
# fold-aware evaluation
# ---------------------------------------------------------------------------


class NuisanceEvaluator:
    """Evaluate nuisance functions at the sample, routing each observation to
    the nuisance set fitted without it.

    With a single :class:`NuisanceSet` every observation uses it. With a
    sequence of sets, ``folds`` assigns observation ``i`` to set
    ``folds.fold[i]``.
    """

    def __init__(self, data: ObservationSet, nuisance, folds=None):
        self.data = data
        if isinstance(nuisance, NuisanceSet):
            self.sets: list[NuisanceSet] = [nuisance]
            self.groups = [np.arange(data.n)]
        else:
            self.sets = list(nuisance)
            if folds is None:
                raise ValidationError("a sequence of nuisance sets needs a fold assignment")
            if len(self.sets) != folds.n_folds:
                raise ValidationError("one nuisance set per fold is required")
            if folds.fold.shape[0] != data.n:
                raise ValidationError("fold assignment does not match the sample size")
            self.groups = folds.groups()

    def _scatter(self, fn: Callable[[NuisanceSet, NDArray], NDArray], lead: tuple = ()) -> NDArray:
        out = np.empty(lead + (self.data.n,))
        for ns, idx in zip(self.sets, self.groups):
            if idx.size:
                out[..., idx] = fn(ns, idx)
        return out

    def outcome_grid(self, which: str, grid: NDArray) -> NDArray:
        """``mu(t_g, S_i)`` or ``beta(t_g, S_i)``, shape ``(G, n)``."""

        def fn(ns: NuisanceSet, idx: NDArray) -> NDArray:
            s = self.data.s[idx]
            f = ns.outcome.mu if which == "mu" else ns.outcome.beta
            return np.stack([f(t, s) for t in grid])

        return self._scatter(fn, (grid.size,))

    def outcome_at_sample(self) -> NDArray:
        return self._scatter(lambda ns, idx: ns.outcome.mu(self.data.t[idx], self.data.s[idx]))

    def density_sample(self, floor: float) -> NDArray:
        """Floored ``p(T_i | S_i)``."""

        def fn(ns: NuisanceSet, idx: NDArray) -> NDArray:
            _need(ns.cond_density, "conditional density")
            return ns.cond_density.density(self.data.t[idx], self.data.s[idx])

        return apply_density_floor(self._scatter(fn), floor)

    def density_query(self, grid: NDArray, floor: float) -> NDArray:
        """Floored ``p(t_g | S_i)``, shape ``(G, n)``."""

        def fn(ns: NuisanceSet, idx: NDArray) -> NDArray:
            _need(ns.cond_density, "conditional density")
            s = self.data.s[idx]
            tt = np.repeat(grid, idx.size)
            ss = np.tile(s, (grid.size, 1))
            return ns.cond_density.density(tt, ss).reshape(grid.size, idx.size)

        return apply_density_floor(self._scatter(fn, (grid.size,)), floor)

    def joint_sample(self, floor: float) -> NDArray:
        """Floored joint density ``p(T_i, S_i)``."""

        def fn(ns: NuisanceSet, idx: NDArray) -> NDArray:
            _need(ns.joint, "joint density")
            return ns.joint.joint(self.data.t[idx], self.data.s[idx])

        return apply_density_floor(self._scatter(fn), floor)

    def marginal_s(self) -> NDArray:
        def fn(ns: NuisanceSet, idx: NDArray) -> NDArray:
            _need(ns.joint, "joint density")
            return ns.joint.p_s(self.data.s[idx])

        return self._scatter(fn)

    def interior(self, grid: NDArray, multiplier: float) -> tuple[NDArray, NDArray]:
        """Interior densities ``p_zeta(S_i | t_g)`` and per-point validity.

        Level sets and normalisers come from each nuisance set's own training
        sample; a grid point is valid only if it is valid for every fold.
        """
        from .nuisance import interior_weights

        valid = np.ones(grid.size, dtype=bool)

        def fn(ns: NuisanceSet, idx: NDArray) -> NDArray:
            _need(ns.joint, "joint density")
            w = interior_weights(ns.joint, grid, self.data.s[idx], ns.train, multiplier)
            valid[:] &= w.valid
            return w.values

        vals = self._scatter(fn, (grid.size,))
        return vals, valid


def _need(obj, what: str) -> None:
    if obj is None:
        raise ValidationError(f"nuisance set lacks a {what}")


def empty_window(strict: bool, t: NDArray, mask: NDArray) -> None:
    if strict and np.any(mask):
        bad = ", ".join(f"{x:g}" for x in t[mask][:5])
        raise EmptyWindowError(f"zero kernel mass at t = {bad}")


def grid_points(grid: EvalGrid | Sequence[float] | NDArray) -> EvalGrid:
    return grid if isinstance(grid, EvalGrid) else EvalGrid(np.asarray(grid, dtype=float))
