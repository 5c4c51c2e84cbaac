"""Cross-fitting, estimator dispatch by tag, and multiplier-bootstrap bands."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from . import nopositivity as npos
from . import positivity as pos
from .data import EstimationConfig, EstimationError, EvalGrid, ObservationSet, ValidationError
from .estimates import CurveEstimate, NuisanceEvaluator, grid_points
from .kernels import bandwidth_rule
from .nuisance import NuisanceFitter, NuisanceSet

# substream tags; every random draw in the package comes from
# SeedSequence(seed, spawn_key=(tag, ...))
STREAM_DATA = 1
STREAM_FOLDS = 2
STREAM_BOOT = 3

ESTIMATORS: tuple[str, ...] = (
    "m_ra", "m_ipw", "m_dr",
    "theta_ra", "theta_ipw", "theta_dr", "theta_dr_eif",
    "theta_c_ra", "theta_c_ipw", "theta_c_dr",
    "m_c_ra", "m_c_ipw", "m_c_dr",
)
NEEDS_JOINT = {"theta_c_ipw", "theta_c_dr", "m_c_ipw", "m_c_dr"}
NEEDS_COND_DENSITY = {"m_ipw", "m_dr", "theta_ipw", "theta_dr", "theta_dr_eif"}


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for the counter ``key`` under a master seed."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))


def derive_seed(seed: int, *key: int) -> int:
    """A 63-bit integer seed drawn from the substream ``key``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    fold: NDArray
    n_folds: int

    def __post_init__(self) -> None:
        f = np.asarray(self.fold)
        if f.ndim != 1 or (f.size and (f.min() < 0 or f.max() >= self.n_folds)):
            raise ValidationError("fold labels must lie in [0, n_folds)")
        object.__setattr__(self, "fold", f.astype(np.int64))

    @property
    def n(self) -> int:
        return int(self.fold.size)

    def groups(self) -> list[NDArray]:
        """Indices of each fold, in increasing order."""
        return [np.flatnonzero(self.fold == k) for k in range(self.n_folds)]

    def sizes(self) -> NDArray:
        return np.bincount(self.fold, minlength=self.n_folds)


def make_folds(n: int, n_folds: int, seed: int = 0, key: tuple[int, ...] = ()) -> FoldAssignment:
    """Balanced random partition of ``range(n)`` into ``n_folds`` folds.

    Fold sizes differ by at most one. ``n_folds=1`` puts everything in fold
    0. ``key`` selects an independent substream of ``seed``.
    """
    if n_folds < 1:
        raise ValidationError("need at least one fold")
    if n_folds > n:
        raise ValidationError(f"cannot split {n} observations into {n_folds} folds")
    if n_folds == 1:
        return FoldAssignment(np.zeros(n, dtype=np.int64), 1)
    perm = substream(seed, STREAM_FOLDS, *key).permutation(n)
    fold = np.empty(n, dtype=np.int64)
    fold[perm] = np.arange(n) % n_folds
    return FoldAssignment(fold, n_folds)


def fit_nuisances(
    data: ObservationSet, fitter: NuisanceFitter, folds: FoldAssignment
) -> NuisanceSet | list[NuisanceSet]:
    """One set fitted on the full sample (one fold) or one per fold complement."""
    if folds.n_folds == 1:
        return fitter.fit(data, "full")
    sets = []
    for k, idx in enumerate(folds.groups()):
        train = np.flatnonzero(folds.fold != k)
        if train.size < 2:
            raise EstimationError(f"fold {k} leaves too few observations to fit nuisances")
        sets.append(fitter.fit(data.subset(train), f"fold{k}"))
    return sets


def run_estimator(
    tag: str,
    data: ObservationSet,
    nuisance,
    config: EstimationConfig,
    h: float,
    grid,
    folds: Optional[FoldAssignment] = None,
) -> CurveEstimate:
    """Evaluate the estimator named ``tag`` with already-fitted nuisances."""
    grid = grid_points(grid)
    if isinstance(nuisance, NuisanceSet):
        folds = None
    c = config
    common = dict(folds=folds, density_floor=c.density_floor, tau=c.ci_level, strict=c.strict)
    sn = c.self_normalized
    if tag == "m_ra":
        return pos.m_ra(data, nuisance, grid, folds, c.ci_level)
    if tag == "theta_ra":
        return pos.theta_ra(data, nuisance, grid, folds, c.ci_level)
    if tag == "m_ipw":
        return pos.m_ipw(data, nuisance, c.kernel, h, grid, c.ipw_weight_point, sn, **common)
    if tag == "m_dr":
        return pos.m_dr(data, nuisance, c.kernel, h, grid, sn, **common)
    if tag == "theta_ipw":
        return pos.theta_ipw(data, nuisance, c.kernel, h, grid, c.ipw_weight_point, sn, **common)
    if tag in ("theta_dr", "theta_dr_eif"):
        form = "local_poly" if tag == "theta_dr" else "eif"
        return pos.theta_dr(data, nuisance, c.kernel, h, grid, form, sn, **common)
    if tag == "theta_c_ra":
        return npos.theta_c_ra(data, nuisance, c.kernel, h, grid, folds, c.ci_level, c.strict)
    if tag == "theta_c_ipw":
        return npos.theta_c_ipw(data, nuisance, c.kernel, h, grid, c.level_multiplier, sn, **common)
    if tag == "theta_c_dr":
        return npos.theta_c_dr(data, nuisance, c.kernel, h, grid, c.level_multiplier, sn, **common)
    if tag in ("m_c_ra", "m_c_ipw", "m_c_dr"):
        return npos.m_c(
            data, nuisance, c.kernel, h, grid, tag[4:], c.level_multiplier, sn, folds,
            c.density_floor, c.fine_grid_size,
        )
    raise ValidationError(f"unknown estimator {tag!r}; choose from {ESTIMATORS}")


def prepare_fitter(tag: str, fitter: NuisanceFitter) -> NuisanceFitter:
    """Switch on the joint density fit when the estimator needs it."""
    if tag in NEEDS_JOINT and not fitter.joint:
        fitter = replace(fitter, joint=True)
    if tag in NEEDS_COND_DENSITY and fitter.density == "none":
        raise ValidationError(f"estimator {tag!r} needs a conditional density model")
    return fitter


def resolve_bandwidth(data: ObservationSet, config: EstimationConfig) -> float:
    return bandwidth_rule(data, config.bw_rule, config.bw_scale).h


def crossfit_curve(
    data: ObservationSet,
    config: EstimationConfig,
    tag: str,
    grid,
    fitter: NuisanceFitter = NuisanceFitter(),
    h: Optional[float] = None,
    folds: Optional[FoldAssignment] = None,
) -> CurveEstimate:
    """Cross-fitted estimate of the curve named ``tag``.

    Nuisances for fold ``k`` are fitted on the other folds and the estimator
    sums over fold ``k`` use them; with one fold the nuisances are fitted on
    the full sample.
    """
    if tag not in ESTIMATORS:
        raise ValidationError(f"unknown estimator {tag!r}; choose from {ESTIMATORS}")
    if h is None:
        h = resolve_bandwidth(data, config)
    if folds is None:
        folds = make_folds(data.n, config.folds, config.rng_seed)
    fitter = prepare_fitter(tag, fitter)
    nuisance = fit_nuisances(data, fitter, folds)
    return run_estimator(tag, data, nuisance, config, h, grid, folds)


# ---------------------------------------------------------------------------
# multiplier bootstrap
# ---------------------------------------------------------------------------

LAWS = ("exponential", "two_point", "degenerate")


def draw_multipliers(rng: np.random.Generator, n: int, law: str) -> NDArray:
    """Mean-one, unit-variance multipliers (``degenerate`` is all ones)."""
    if law == "exponential":
        return rng.exponential(1.0, n)
    if law == "two_point":
        return 2.0 * rng.integers(0, 2, n).astype(float)
    if law == "degenerate":
        return np.ones(n)
    raise ValidationError(f"unknown multiplier law {law!r}; choose from {LAWS}")


@dataclass(frozen=True, eq=False)
class UniformBand:
    """Simultaneous band ``estimate +- quantile * se`` over the grid."""

    curve: CurveEstimate
    quantile: float
    B: int
    law: str
    sup_stats: NDArray
    included: NDArray

    @property
    def half_width(self) -> NDArray:
        hw = self.quantile * self.curve.standard_error()
        return np.where(self.included, hw, np.nan)

    @property
    def lower(self) -> NDArray:
        return self.curve.estimate - self.half_width

    @property
    def upper(self) -> NDArray:
        return self.curve.estimate + self.half_width


class _Replicator:
    """Bootstrap replicate of a kernel derivative estimator for given multipliers.

    The base estimate is the replicate at ``z = 1`` computed by the same code
    path, so unit multipliers reproduce it exactly.
    """

    def __init__(self, parts, n: int, h: float, self_normalized: bool, ra: Optional[NDArray]):
        self.num = parts.u * parts.w * parts.resid / (parts.kappa2 * h)
        self.w = parts.w
        self.beta = parts.beta
        self.n, self.h = n, h
        self.sn = self_normalized
        self.ra = ra

    def __call__(self, z: NDArray) -> NDArray:
        num = (self.num * z).sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.sn:
                ipw = num / (self.w * z).sum(axis=1)
            else:
                ipw = num / (self.n * self.h)
        if self.ra is not None:
            return ipw + self.ra
        return ipw + (self.beta * z).sum(axis=1) / self.n


BOOTSTRAP_ESTIMATORS = ("theta_dr", "theta_dr_eif", "theta_ipw", "theta_c_ipw", "theta_c_dr")


def multiplier_bootstrap_band(
    data: ObservationSet,
    nuisance,
    config: EstimationConfig,
    grid,
    B: int = 500,
    tau: Optional[float] = None,
    h: Optional[float] = None,
    folds: Optional[FoldAssignment] = None,
    estimator: str = "theta_dr",
    law: str = "exponential",
    key: tuple[int, ...] = (),
) -> UniformBand:
    """Uniform band for ``theta`` by the multiplier bootstrap with fixed nuisances.

    Replicate ``b`` draws its multipliers from substream ``(boot, *key, b)``
    of ``config.rng_seed``. The quantile is the order statistic at
    ``ceil((1 - tau) B)`` of ``sup_t sqrt(n h^3) |theta* - theta| / sqrt(V)``,
    where the sup skips grid points with no kernel mass or zero variance.
    """
    if B < 1:
        raise ValidationError("need at least one bootstrap replicate")
    if estimator not in BOOTSTRAP_ESTIMATORS:
        raise ValidationError(f"bootstrap supports {BOOTSTRAP_ESTIMATORS}, not {estimator!r}")
    tau = config.ci_level if tau is None else tau
    grid = grid_points(grid)
    if h is None:
        h = resolve_bandwidth(data, config)
    if isinstance(nuisance, NuisanceSet):
        folds = None
    curve = run_estimator(estimator, data, nuisance, config.evolve(strict=False, ci_level=tau), h, grid, folds)
    c = config
    if estimator in ("theta_c_ipw", "theta_c_dr"):
        parts, ra, _ = npos.interior_components(
            data, nuisance, c.kernel, h, grid, c.level_multiplier, estimator == "theta_c_dr",
            folds, c.density_floor,
        )
    else:
        form = {"theta_dr": "local_poly", "theta_dr_eif": "eif", "theta_ipw": "ipw"}[estimator]
        variant = c.ipw_weight_point if estimator == "theta_ipw" else "sample_point"
        parts = pos.theta_components(data, nuisance, c.kernel, h, grid, form, folds, c.density_floor, variant)
        ra = None
    rep = _Replicator(parts, data.n, h, c.self_normalized, ra)
    base = rep(np.ones(data.n))

    included = (curve.n_effective > 0) & np.isfinite(curve.variance) & (curve.variance > 0)
    if not included.any():
        raise EstimationError("every grid point has zero variance or no kernel mass")
    scale = np.sqrt(data.n * h**3 / curve.variance[included])
    sups = np.empty(B)
    for b in range(B):
        z = draw_multipliers(substream(c.rng_seed, STREAM_BOOT, *key, b), data.n, law)
        sups[b] = np.max(np.abs(rep(z) - base)[included] * scale)
    k = max(math.ceil((1.0 - tau) * B), 1)
    q = float(np.sort(sups)[k - 1])
    return UniformBand(curve.with_band(q), q, B, law, sups, included)


__all__ = [
    "ESTIMATORS",
    "FoldAssignment",
    "UniformBand",
    "crossfit_curve",
    "derive_seed",
    "draw_multipliers",
    "fit_nuisances",
    "make_folds",
    "multiplier_bootstrap_band",
    "prepare_fitter",
    "resolve_bandwidth",
    "run_estimator",
    "substream",
]
