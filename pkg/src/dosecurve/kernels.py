"""Second-order smoothing kernels, their moment constants and bandwidth rules.

``kappa_j = int u**j K(u) du`` and ``nu_j = int u**j K(u)**2 du`` are returned
in closed form for every supported kind.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import integrate

from .data import EstimationError, ObservationSet, ValidationError

KernelKind = Literal["epanechnikov", "gaussian", "triangular", "uniform"]
KINDS: tuple[str, ...] = ("epanechnikov", "gaussian", "triangular", "uniform")

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class DegenerateBandwidthError(EstimationError):
    """The sample spread is zero, so a data-driven bandwidth is undefined."""


@dataclass(frozen=True)
class KernelSpec:
    kind: KernelKind = "epanechnikov"

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValidationError(f"unknown kernel {self.kind!r}; choose from {KINDS}")

    @property
    def compact(self) -> bool:
        return self.kind != "gaussian"

    def __call__(self, u: ArrayLike) -> NDArray:
        return eval_kernel(self, u)

    @property
    def kappa2(self) -> float:
        return kernel_moment(self, 2)


def as_kernel(kernel: KernelSpec | str) -> KernelSpec:
    return kernel if isinstance(kernel, KernelSpec) else KernelSpec(kernel)


def eval_kernel(spec: KernelSpec | str, u: ArrayLike) -> NDArray | float:
    """Evaluate ``K(u)``; vectorised over ``u``. Scalars in, scalar out."""
    kind = as_kernel(spec).kind
    x = np.asarray(u, dtype=float)
    if kind == "gaussian":
        out = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    else:
        inside = np.abs(x) <= 1.0
        if kind == "epanechnikov":
            out = np.where(inside, 0.75 * (1.0 - x * x), 0.0)
        elif kind == "triangular":
            out = np.where(inside, 1.0 - np.abs(x), 0.0)
        else:
            out = np.where(inside, 0.5, 0.0)
    return float(out) if out.ndim == 0 else out


def kernel_moment(spec: KernelSpec | str, j: int, squared: bool = False) -> float:
    """Return ``kappa_j`` (``squared=False``) or ``nu_j`` (``squared=True``)."""
    if j < 0:
        raise ValidationError("moment order must be non-negative")
    kind = as_kernel(spec).kind
    if j % 2 == 1:
        return 0.0
    if kind == "epanechnikov":
        if squared:
            return 9.0 / 8.0 * (1.0 / (j + 1) - 2.0 / (j + 3) + 1.0 / (j + 5))
        return 3.0 / ((j + 1) * (j + 3))
    if kind == "gaussian":
        if squared:
            return math.gamma((j + 1) / 2.0) / (2.0 * math.pi)
        # (j-1)!! for even j
        return float(math.prod(range(j - 1, 0, -2))) if j > 0 else 1.0
    if kind == "triangular":
        if squared:
            return 4.0 / ((j + 1) * (j + 2) * (j + 3))
        return 2.0 / ((j + 1) * (j + 2))
    if squared:
        return 1.0 / (2.0 * (j + 1))
    return 1.0 / (j + 1)


def kernel_moment_quad(spec: KernelSpec | str, j: int, squared: bool = False) -> float:
    """Adaptive-quadrature value of the same moment (independent check)."""
    k = as_kernel(spec)
    power = 2 if squared else 1

    def f(u: float) -> float:
        return u**j * eval_kernel(k, u) ** power

    if k.compact:
        pieces = [(-1.0, 0.0), (0.0, 1.0)]
    else:
        pieces = [(-np.inf, 0.0), (0.0, np.inf)]
    return sum(integrate.quad(f, a, b, epsabs=1e-14, epsrel=1e-13, limit=200)[0] for a, b in pieces)


@dataclass(frozen=True)
class Bandwidth:
    h: float
    rule: str = "fixed"

    def __post_init__(self) -> None:
        if not (np.isfinite(self.h) and self.h > 0):
            raise ValidationError(f"bandwidth must be positive and finite, got {self.h}")

    def __float__(self) -> float:
        return float(self.h)


SILVERMAN_CONST = (4.0 / 3.0) ** 0.2


def bandwidth_rule(
    data: ObservationSet | ArrayLike, rule: str = "scaled", scale: float = 1.25
) -> Bandwidth:
    """Choose a bandwidth from the spread of a sample.

    For an :class:`ObservationSet` the treatment column is used. ``"scaled"``
    gives ``scale * sd * n**(-1/5)``; ``"silverman"`` gives
    ``(4/3)**(1/5) * sd * n**(-1/5)``; ``"fixed"`` returns ``scale`` itself.
    ``sd`` is the sample standard deviation (``ddof=1``).
    """
    if rule == "fixed":
        return Bandwidth(float(scale), "fixed")
    x = data.t if isinstance(data, ObservationSet) else np.asarray(data, dtype=float).ravel()
    n = x.size
    if n < 2:
        raise DegenerateBandwidthError("need at least two values to estimate a spread")
    sd = float(np.std(x, ddof=1))
    if not sd > 0:
        raise DegenerateBandwidthError("sample has zero variance")
    if rule == "scaled":
        if not scale > 0:
            raise ValidationError("bandwidth scale must be positive")
        return Bandwidth(scale * sd * n ** (-0.2), f"scaled:{scale}")
    if rule == "silverman":
        return Bandwidth(SILVERMAN_CONST * sd * n ** (-0.2), "silverman")
    raise ValidationError(f"unknown bandwidth rule {rule!r}")
