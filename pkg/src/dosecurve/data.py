"""Sample containers, evaluation grids and estimation settings."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray


class DoseCurveError(Exception):
    """Base class for all errors raised by the package."""


class ValidationError(DoseCurveError, ValueError):
    """Input data or configuration violates a documented invariant."""


class DimensionMismatchError(ValidationError):
    pass


class NonFiniteError(ValidationError):
    pass


class EstimationError(DoseCurveError, RuntimeError):
    """A numerical step could not be carried out on otherwise valid input."""


class EmptyWindowError(EstimationError):
    """No observation falls inside the kernel window of a query point."""


def _frozen(a: NDArray) -> NDArray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Observed sample ``(Y_i, T_i, S_i)``.

    Arrays are copied on construction and marked read-only. Discrete
    covariates must be encoded as numeric columns by the caller.
    """

    y: NDArray
    t: NDArray
    s: NDArray

    def __post_init__(self) -> None:
        s = np.asarray(self.s, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        object.__setattr__(self, "y", _frozen(np.asarray(self.y, dtype=float).ravel()))
        object.__setattr__(self, "t", _frozen(np.asarray(self.t, dtype=float).ravel()))
        object.__setattr__(self, "s", _frozen(s))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def d(self) -> int:
        return self.s.shape[1]

    def subset(self, idx: ArrayLike) -> "ObservationSet":
        idx = np.asarray(idx)
        return ObservationSet(self.y[idx], self.t[idx], self.s[idx])

    def with_outcome(self, y: ArrayLike) -> "ObservationSet":
        return ObservationSet(np.asarray(y, dtype=float), self.t, self.s)


def validate(data: ObservationSet) -> ObservationSet:
    """Check the invariants of an observation set and return it unchanged.

    Raises
    ------
    DimensionMismatchError
        If ``y``, ``t`` and ``s`` disagree on the number of rows, or ``s`` has
        no columns.
    NonFiniteError
        If any entry is NaN or infinite.
    ValidationError
        If fewer than two observations are present.
    """
    n = data.y.shape[0]
    if data.t.shape[0] != n or data.s.shape[0] != n:
        raise DimensionMismatchError(
            f"row counts differ: y={n}, t={data.t.shape[0]}, s={data.s.shape[0]}"
        )
    if data.s.ndim != 2 or data.s.shape[1] < 1:
        raise DimensionMismatchError("covariate matrix must have at least one column")
    for name in ("y", "t", "s"):
        if not np.all(np.isfinite(getattr(data, name))):
            raise NonFiniteError(f"{name} contains non-finite entries")
    if n < 2:
        raise ValidationError(f"need at least 2 observations, got {n}")
    return data


@dataclass(frozen=True, eq=False)
class EvalGrid:
    """Strictly increasing treatment values at which curves are evaluated."""

    points: NDArray

    def __post_init__(self) -> None:
        p = np.atleast_1d(np.asarray(self.points, dtype=float)).ravel()
        if p.size < 1:
            raise ValidationError("grid must contain at least one point")
        if not np.all(np.isfinite(p)):
            raise NonFiniteError("grid contains non-finite points")
        if p.size > 1 and not np.all(np.diff(p) > 0):
            raise ValidationError("grid points must be strictly increasing")
        object.__setattr__(self, "points", _frozen(p))

    def __len__(self) -> int:
        return self.points.size

    @classmethod
    def linspace(cls, lo: float, hi: float, count: int) -> "EvalGrid":
        return cls(np.linspace(lo, hi, count))

    @classmethod
    def parse(cls, text: str) -> "EvalGrid":
        """Build a grid from ``"lo:hi:count"``."""
        try:
            lo, hi, count = text.split(":")
            return cls.linspace(float(lo), float(hi), int(count))
        except ValueError as exc:
            raise ValidationError(f"bad grid spec {text!r}; expected lo:hi:count") from exc

    @classmethod
    def default(cls) -> "EvalGrid":
        # 81 equally spaced points on [-2, 2]
        return cls.linspace(-2.0, 2.0, 81)


WeightPoint = Literal["sample_point", "query_point"]


@dataclass(frozen=True)
class EstimationConfig:
    """Settings shared by the estimators, cross-fitting and the harness.

    ``bw_rule`` is ``"scaled"`` (``bw_scale * sd(T) * n**(-1/5)``),
    ``"silverman"`` or ``"fixed"`` (``bw_scale`` used as the bandwidth).
    """

    kernel: str = "epanechnikov"
    bw_rule: str = "scaled"
    bw_scale: float = 1.25
    folds: int = 5
    self_normalized: bool = True
    ipw_weight_point: WeightPoint = "sample_point"
    density_floor: float = 0.001
    ci_level: float = 0.05
    level_multiplier: float = 0.5
    fine_grid_size: int = 400
    rng_seed: int = 0
    strict: bool = False
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if not self.bw_scale > 0:
            raise ValidationError("bandwidth scale must be positive")
        if not self.density_floor > 0:
            raise ValidationError("density floor must be positive")
        if not 0 < self.ci_level < 1:
            raise ValidationError("ci_level must lie in (0, 1)")
        if self.folds < 1:
            raise ValidationError("folds must be >= 1")
        if self.ipw_weight_point not in ("sample_point", "query_point"):
            raise ValidationError(f"unknown weight point {self.ipw_weight_point!r}")
        if not self.level_multiplier > 0:
            raise ValidationError("level multiplier must be positive")
        if self.rng_seed < 0:
            raise ValidationError("rng_seed must be non-negative")

    def evolve(self, **changes) -> "EstimationConfig":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return {
            "kernel": self.kernel,
            "bw_rule": self.bw_rule,
            "bw_scale": self.bw_scale,
            "folds": self.folds,
            "self_normalized": self.self_normalized,
            "ipw_weight_point": self.ipw_weight_point,
            "density_floor": self.density_floor,
            "ci_level": self.ci_level,
            "level_multiplier": self.level_multiplier,
            "fine_grid_size": self.fine_grid_size,
            "rng_seed": self.rng_seed,
        }
