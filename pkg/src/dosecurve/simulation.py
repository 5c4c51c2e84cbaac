"""Data-generating processes and the Monte-Carlo harness."""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.special import ndtr
from scipy.stats import norm

from .crossfit import STREAM_DATA, crossfit_curve, make_folds, substream
from .data import DoseCurveError, EstimationConfig, EvalGrid, ObservationSet, ValidationError
from .estimates import grid_points
from .nuisance import BasisConfig, NuisanceFitter


@dataclass(frozen=True, eq=False)
class SimulatedData:
    """A draw from a DGP together with its known truths and oracle nuisances."""

    data: ObservationSet
    theta: Callable[[NDArray], NDArray]
    m: Callable[[NDArray], NDArray]
    density: Callable
    mu: Callable
    beta: Callable


def _xi(d: int) -> NDArray:
    return 1.0 / np.arange(1, d + 1) ** 2


def dgp1_covariance(d: int) -> NDArray:
    """Unit diagonal, 0.5 on the first off-diagonals."""
    cov = np.eye(d)
    idx = np.arange(d - 1)
    cov[idx, idx + 1] = cov[idx + 1, idx] = 0.5
    return cov


def dgp1_theta(t):
    return 1.2 + 2.0 * np.asarray(t, dtype=float)


def dgp1_m(t):
    t = np.asarray(t, dtype=float)
    return 1.2 * t + t**2


def dgp1_oracles(d: int):
    """``p(t|s)``, ``mu(t,s)`` and ``beta(t,s)`` of the first design."""
    xi = _xi(d)

    def density(t, s):
        s = np.atleast_2d(s)
        loc = ndtr(3.0 * (s @ xi)) - 0.5
        return norm.pdf((np.asarray(t, dtype=float) - loc) / 0.75) / 0.75

    def mu(t, s):
        s = np.atleast_2d(s)
        t = np.asarray(t, dtype=float)
        return 1.2 * t + t**2 + t * s[:, 0] + 1.2 * (s @ xi)

    def beta(t, s):
        s = np.atleast_2d(s)
        return 1.2 + 2.0 * np.asarray(t, dtype=float) + s[:, 0]

    return density, mu, beta


def gen_dgp1(n: int, d: int = 5, seed=0) -> SimulatedData:
    """Draw ``n`` observations from the smooth positivity-satisfying design.

    ``S ~ N_d(0, Sigma)``, ``T = Phi(3 xi'S) - 0.5 + 0.75 E``,
    ``Y = 1.2T + T^2 + T S_1 + 1.2 xi'S + eps sqrt(0.5 + Phi(S_1))``.
    ``seed`` is anything :func:`numpy.random.default_rng` accepts.
    """
    if n < 2:
        raise ValidationError("n must be at least 2")
    if d < 1:
        raise ValidationError("d must be at least 1")
    try:
        chol = np.linalg.cholesky(dgp1_covariance(d))
    except np.linalg.LinAlgError as exc:  # pragma: no cover - the matrix is always PD
        raise DoseCurveError("covariance is not positive definite") from exc
    rng = np.random.default_rng(seed)
    s = rng.standard_normal((n, d)) @ chol.T
    e = rng.standard_normal(n)
    eps = rng.standard_normal(n)
    xi = _xi(d)
    t = ndtr(3.0 * (s @ xi)) - 0.5 + 0.75 * e
    y = 1.2 * t + t**2 + t * s[:, 0] + 1.2 * (s @ xi) + eps * np.sqrt(0.5 + ndtr(s[:, 0]))
    density, mu, beta = dgp1_oracles(d)
    return SimulatedData(ObservationSet(y, t, s), dgp1_theta, dgp1_m, density, mu, beta)


def dgp2_theta(t):
    t = np.asarray(t, dtype=float)
    return 3.0 * t**2 + 2.0 * t


def dgp2_m(t):
    t = np.asarray(t, dtype=float)
    return t**3 + t**2


def dgp2_oracles():
    def density(t, s):
        s = np.atleast_2d(s)[:, 0]
        inside = np.abs(np.asarray(t, dtype=float) - np.sin(np.pi * s)) <= 0.3
        return np.where(inside, 1.0 / 0.6, 0.0)

    def mu(t, s):
        s = np.atleast_2d(s)
        t = np.asarray(t, dtype=float)
        return t**3 + t**2 + 10.0 * s[:, 0]

    def beta(t, s):
        s = np.atleast_2d(s)
        t = np.asarray(t, dtype=float)
        return 3.0 * t**2 + 2.0 * t + 0.0 * s[:, 0]

    return density, mu, beta


def gen_dgp2(n: int, seed=0) -> SimulatedData:
    """Draw from the thin-band design where positivity fails.

    ``S ~ U[-1, 1]``, ``T = sin(pi S) + E`` with ``E ~ U[-0.3, 0.3]`` and
    ``Y = T^3 + T^2 + 10 S + eps``.
    """
    if n < 2:
        raise ValidationError("n must be at least 2")
    rng = np.random.default_rng(seed)
    s = rng.uniform(-1.0, 1.0, n)
    e = rng.uniform(-0.3, 0.3, n)
    eps = rng.standard_normal(n)
    t = np.sin(np.pi * s) + e
    y = t**3 + t**2 + 10.0 * s + eps
    density, mu, beta = dgp2_oracles()
    return SimulatedData(ObservationSet(y, t, s[:, None]), dgp2_theta, dgp2_m, density, mu, beta)


# ---------------------------------------------------------------------------
# harness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DgpSpec:
    kind: str = "dgp1"
    n: int = 1000
    d: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("dgp1", "dgp2"):
            raise ValidationError(f"unknown DGP {self.kind!r}")
        if self.n < 2:
            raise ValidationError("n must be at least 2")
        if self.kind == "dgp1" and self.d < 1:
            raise ValidationError("dgp1 needs d >= 1")
        if self.kind == "dgp2" and self.d != 1:
            object.__setattr__(self, "d", 1)
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")

    def draw(self, replication: int) -> SimulatedData:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(STREAM_DATA, replication))
        if self.kind == "dgp1":
            return gen_dgp1(self.n, self.d, ss)
        return gen_dgp2(self.n, ss)

    def oracles(self):
        return dgp1_oracles(self.d) if self.kind == "dgp1" else dgp2_oracles()

    def truth(self, tag: str) -> Callable:
        if self.kind == "dgp1":
            return dgp1_m if tag.startswith("m") else dgp1_theta
        return dgp2_m if tag.startswith("m") else dgp2_theta

    def as_dict(self) -> dict:
        return {"kind": self.kind, "n": self.n, "d": self.d, "seed": self.seed}


@dataclass(frozen=True)
class EstimatorSpec:
    """An estimator tag with its nuisance recipe; ``name`` labels the output."""

    tag: str
    fitter: NuisanceFitter = NuisanceFitter()
    name: str = ""

    @property
    def label(self) -> str:
        return self.name or self.tag


def preset(kind: str) -> tuple[EstimationConfig, NuisanceFitter]:
    """Default configuration and nuisance recipe for each design."""
    if kind == "dgp1":
        cfg = EstimationConfig(kernel="epanechnikov", bw_rule="scaled", bw_scale=1.25, folds=5)
        fit = NuisanceFitter(outcome="poly", basis=BasisConfig(2, 1, True), density="kde_residual")
        return cfg, fit
    if kind == "dgp2":
        cfg = EstimationConfig(kernel="epanechnikov", bw_rule="scaled", bw_scale=2.0, folds=5)
        fit = NuisanceFitter(
            outcome="poly", basis=BasisConfig(3, 1, False), density="kde_residual",
            density_kernel="gaussian", joint_kernel="gaussian",
        )
        return cfg, fit
    raise ValidationError(f"unknown DGP {kind!r}")


@dataclass(frozen=True, eq=False)
class SimulationReport:
    """Per-grid-point Monte-Carlo summaries for one estimator.

    ``estimates``, ``variances`` and ``covered`` keep the raw replications
    (rows), with NaN rows for replications that failed in batch mode.
    """

    grid: EvalGrid
    estimator: str
    R: int
    truth: NDArray
    mean_estimate: NDArray
    bias: NDArray
    rmse: NDArray
    coverage: NDArray
    mean_variance: NDArray
    mean_ci_lower: NDArray
    mean_ci_upper: NDArray
    n_failed: int
    estimates: NDArray = field(repr=False)
    variances: NDArray = field(repr=False)
    covered: NDArray = field(repr=False)
    config: dict = field(default_factory=dict)

    @property
    def t(self) -> NDArray:
        return self.grid.points

    def bias_se(self) -> NDArray:
        """Monte-Carlo standard error of the mean bias."""
        ok = np.isfinite(self.estimates)
        k = ok.sum(axis=0)
        sd = np.nanstd(self.estimates, axis=0, ddof=1) if self.estimates.shape[0] > 1 else 0.0
        return sd / np.sqrt(np.maximum(k, 1))


def summarise(
    grid: EvalGrid, label: str, truth: NDArray, est: NDArray, var: NDArray, lo: NDArray,
    hi: NDArray, failed: int, config: dict,
) -> SimulationReport:
    """Bias, RMSE and coverage from replication arrays of shape ``(R, G)``."""
    R = est.shape[0]
    ok = ~np.all(np.isnan(est), axis=1)
    err = est[ok] - truth[None, :]
    with np.errstate(invalid="ignore"):
        bias = err.mean(axis=0) if ok.any() else np.full(truth.shape, np.nan)
        spread = err.std(axis=0) if ok.any() else np.full(truth.shape, np.nan)
    rmse = np.hypot(bias, spread)
    hit = (lo <= truth[None, :]) & (truth[None, :] <= hi)
    coverage = hit[ok].mean(axis=0) if ok.any() else np.full(truth.shape, np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mv = np.nanmean(var[ok], axis=0) if ok.any() else np.full(truth.shape, np.nan)
        mlo = np.nanmean(lo[ok], axis=0) if ok.any() else np.full(truth.shape, np.nan)
        mhi = np.nanmean(hi[ok], axis=0) if ok.any() else np.full(truth.shape, np.nan)
    return SimulationReport(
        grid, label, R, truth, truth + bias, bias, rmse, coverage, mv, mlo, mhi, failed,
        est, var, hit, config,
    )


def _with_oracles(fitter: NuisanceFitter, dgp: DgpSpec) -> NuisanceFitter:
    density, mu, beta = dgp.oracles()
    changes = {}
    if fitter.density == "oracle" and fitter.oracle_density is None:
        changes["oracle_density"] = density
    if fitter.outcome == "oracle" and fitter.oracle_mu is None:
        changes["oracle_mu"] = mu
        changes["oracle_beta"] = beta
    return replace(fitter, **changes) if changes else fitter


def run_monte_carlo(
    dgp: DgpSpec,
    estimators: Sequence[EstimatorSpec | str],
    config: EstimationConfig,
    grid,
    R: int,
    workers: int = 1,
    fitter: Optional[NuisanceFitter] = None,
) -> list[SimulationReport]:
    """Repeat draw, cross-fit and estimate ``R`` times; summarise per estimator.

    Replication ``r`` draws data and folds from its own substreams of
    ``dgp.seed``, so the reports do not depend on ``workers``. Failures
    abort when ``config.strict`` is set; otherwise the replication is
    recorded as NaN and counted in ``n_failed``.
    """
    if R < 1:
        raise ValidationError("need at least one replication")
    if workers < 1:
        raise ValidationError("workers must be >= 1")
    grid = grid_points(grid)
    default_fit = fitter if fitter is not None else preset(dgp.kind)[1]
    specs = [EstimatorSpec(e, default_fit) if isinstance(e, str) else e for e in estimators]
    specs = [replace(s, fitter=_with_oracles(s.fitter, dgp)) for s in specs]
    G, E = len(grid), len(specs)
    est = np.full((E, R, G), np.nan)
    var = np.full((E, R, G), np.nan)
    lo = np.full((E, R, G), np.nan)
    hi = np.full((E, R, G), np.nan)
    failed = np.zeros((E, R), dtype=bool)

    def one(r: int) -> None:
        draw = dgp.draw(r)
        folds = make_folds(draw.data.n, config.folds, dgp.seed, key=(r,))
        for k, spec in enumerate(specs):
            try:
                curve = crossfit_curve(draw.data, config, spec.tag, grid, spec.fitter, folds=folds)
            except DoseCurveError:
                if config.strict:
                    raise
                failed[k, r] = True
                continue
            est[k, r] = curve.estimate
            var[k, r] = curve.variance
            lo[k, r] = curve.ci_lower
            hi[k, r] = curve.ci_upper

    if workers == 1:
        for r in range(R):
            one(r)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(one, range(R)))

    echo = {"dgp": dgp.as_dict(), "config": config.as_dict(), "R": R}
    reports = []
    for k, spec in enumerate(specs):
        truth = np.asarray(dgp.truth(spec.tag)(grid.points), dtype=float)
        cfg = dict(echo, estimator=spec.tag, fitter=fitter_dict(spec.fitter))
        reports.append(
            summarise(grid, spec.label, truth, est[k], var[k], lo[k], hi[k], int(failed[k].sum()), cfg)
        )
    return reports


def fitter_dict(f: NuisanceFitter) -> dict:
    return {
        "outcome": f.outcome,
        "basis": {"t_degree": f.basis.t_degree, "s_degree": f.basis.s_degree,
                  "interactions": f.basis.interactions},
        "ridge": f.ridge,
        "density": f.density,
        "density_kernel": f.density_kernel,
        "joint": f.joint,
        "joint_kernel": f.joint_kernel,
    }
