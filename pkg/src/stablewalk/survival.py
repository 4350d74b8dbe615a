"""Monte Carlo survival probabilities ``P_j(tau_y > n)``, the harmonic
function estimate ``V(j, y) ~ n^(1-rho) l P_j(tau_y > n)``, its one-step
harmonicity, its growth in ``y`` and the conditioned endpoint law.

Barrier convention: ``tau_y = inf{k >= 1 : y + S_k <= 0}``, so survival to
``n`` is ``min_{1<=k<=n} S_k > -y``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import _mc
from .chain import ChainIncrements, ChainModel, simulate_walks
from .decomp import PoissonSolution, martingale_increments
from .errors import ConfigError, StatisticalAbort
from .stable import StableParams, positivity_parameter, sample_standard_stable
from .stats import binomial_stderr, bootstrap_ci, loglog_fit

__all__ = [
    "ConditionedSamples",
    "ExitConfig",
    "ExponentFit",
    "GrowthFit",
    "HarmonicEstimate",
    "HarmonicTable",
    "HarmonicityReport",
    "MartingaleIncrements",
    "OneStepExpectation",
    "SandwichCounts",
    "ScaleCalibration",
    "SurvivalTable",
    "calibrate_scale",
    "calibrate_scale_from_endpoints",
    "check_harmonicity",
    "conditioned_endpoint_samples",
    "estimate_harmonic",
    "estimate_survival",
    "fit_exponent",
    "growth_fit_from_values",
    "geometric_grid",
    "harmonic_growth_fit",
    "harmonic_table",
    "martingale_survival",
    "model_rho",
    "one_step_expectation",
    "sandwich_counts",
    "survival_counts",
]


def model_rho(model: ChainModel) -> float:
    return positivity_parameter(model.alpha, model.skew_beta)


def _check_grid(n_grid, name="n_grid") -> np.ndarray:
    g = np.asarray(n_grid, dtype=np.int64)
    if g.ndim != 1 or g.size == 0 or np.any(g < 1) or np.any(np.diff(g) <= 0):
        raise ConfigError(f"{name} must be strictly increasing positive integers")
    return g


@dataclass(frozen=True)
class ExitConfig:
    j0: int
    y: float
    n_grid: tuple
    paths: int
    seed: int

    def __post_init__(self):
        if not (self.y > 0 and math.isfinite(self.y)):
            raise ConfigError(f"y must be positive, got {self.y}")
        _check_grid(self.n_grid)
        if self.paths < 1000:
            raise ConfigError(f"paths must be >= 1000, got {self.paths}")
        if not (0 <= int(self.seed) < 2**64):
            raise ConfigError("seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "n_grid", tuple(int(n) for n in self.n_grid))


@dataclass(frozen=True)
class SurvivalTable:
    n: np.ndarray
    p_hat: np.ndarray
    stderr: np.ndarray
    survivors: np.ndarray
    paths: int
    y: float = float("nan")

    @property
    def flagged(self) -> np.ndarray:
        return self.survivors == 0

    @classmethod
    def from_counts(cls, n, survivors, paths, y=float("nan")) -> SurvivalTable:
        survivors = np.asarray(survivors, dtype=np.int64)
        p = survivors / paths
        return cls(np.asarray(n), p, binomial_stderr(p, paths), survivors, int(paths), float(y))

    def rows(self):
        for n, p, se, c in zip(self.n, self.p_hat, self.stderr, self.survivors):
            yield int(n), float(p), float(se), int(c)


def survival_counts(model, j0, ys, n_grid, paths, seed, workers=None) -> np.ndarray:
    """Survivor counts ``(len(ys), len(n_grid))`` on shared paths."""
    ys = np.atleast_1d(np.asarray(ys, dtype=float))
    if np.any(ys <= 0):
        raise ConfigError("barrier levels must be positive")
    res = _mc.run_exit(ChainIncrements(model, j0), _check_grid(n_grid), float(ys.max()), paths, seed, workers)
    return np.stack([res.survivor_counts(y) for y in ys])


def estimate_survival(model: ChainModel, cfg: ExitConfig, workers: int | None = None) -> SurvivalTable:
    """``P_j0(tau_y > n)`` for every ``n`` in ``cfg.n_grid`` on one set of paths.

    Rows are nested events on shared trajectories, so ``p_hat`` is
    nonincreasing in ``n``. Rows with zero survivors are flagged.
    """
    counts = survival_counts(model, cfg.j0, [cfg.y], cfg.n_grid, cfg.paths, cfg.seed, workers)[0]
    table = SurvivalTable.from_counts(cfg.n_grid, counts, cfg.paths, cfg.y)
    if table.flagged.any():
        warnings.warn(f"zero survivors at n = {table.n[table.flagged].tolist()}", stacklevel=2)
    return table


@dataclass(frozen=True)
class ExponentFit:
    slope: float
    stderr: float
    intercept: float
    rows_used: int


def fit_exponent(table: SurvivalTable, n_min: int = 1) -> ExponentFit:
    """Weighted log-log regression of ``p_hat`` on ``n`` over ``n >= n_min``.

    Weights are ``1 / se(log p_hat)^2``; if any used row has zero standard
    error the fit is unweighted.
    """
    use = (np.asarray(table.n) >= n_min) & (np.asarray(table.p_hat) > 0)
    if use.sum() < 4:
        raise StatisticalAbort(f"exponent fit needs >= 4 usable rows, got {int(use.sum())}")
    n = np.asarray(table.n, dtype=float)[use]
    p = np.asarray(table.p_hat)[use]
    se = np.asarray(table.stderr)[use]
    weights = None if np.any(se <= 0) else (p / se) ** 2
    fit = loglog_fit(n, p, weights, absolute_sigma=weights is not None)
    return ExponentFit(slope=fit.slope, stderr=fit.slope_stderr, intercept=fit.intercept, rows_used=fit.npoints)


# ----------------------------------------------------------------------------
# scale calibration


def _iqr(x, axis=None):
    q75, q25 = np.percentile(x, [75, 25], axis=axis)
    return q75 - q25


@lru_cache(maxsize=32)
def reference_iqr(alpha: float, beta: float, draws: int = 4_000_000, seed: int = 20240611) -> float:
    """Interquartile range of the unit-scale strictly stable law (Monte Carlo)."""
    rng = _mc.substream(seed, 7)
    return float(_iqr(sample_standard_stable(StableParams(alpha, beta), rng, size=draws)))


@dataclass(frozen=True)
class ScaleCalibration:
    ell: float
    ci: tuple
    n_cal: int
    samples: int


def calibrate_scale_from_endpoints(
    endpoints, n_cal: int, alpha: float, beta: float, seed: int = 0, resamples: int = 400, level: float = 0.95
) -> ScaleCalibration:
    """``l`` such that ``endpoints / n_cal^(1/alpha)`` has the IQR of ``l Z``."""
    x = np.asarray(endpoints, dtype=float) / n_cal ** (1.0 / alpha)
    ref = reference_iqr(float(alpha), float(beta))
    ell = float(_iqr(x)) / ref
    lo, hi = bootstrap_ci(x, _iqr, resamples=resamples, level=level, seed=seed)
    return ScaleCalibration(ell=ell, ci=(lo / ref, hi / ref), n_cal=int(n_cal), samples=int(x.size))


def calibrate_scale(
    model: ChainModel, n_cal: int = 1024, paths: int = 20_000, seed: int = 0, workers: int | None = None
) -> ScaleCalibration:
    """Calibrate the constant normalization ``l`` standing in for ``L(n)``,
    from stationary-start endpoints ``S_{n_cal}``."""
    if n_cal < 1024:
        raise ConfigError("n_cal must be >= 1024")
    res = _mc.run_exit(ChainIncrements(model, None), [n_cal], math.inf, paths, seed, workers)
    return calibrate_scale_from_endpoints(res.end_at[:, 0], n_cal, model.alpha, model.skew_beta, seed=seed)


# ----------------------------------------------------------------------------
# harmonic function


@dataclass(frozen=True)
class HarmonicEstimate:
    v_hat: float
    n_used: int
    ci: tuple
    scale_ell: float
    p_hat: float = float("nan")
    stderr: float = float("nan")
    survivors: int = 0


def _norm(model: ChainModel, n: int, ell: float) -> float:
    return n ** (1.0 - model_rho(model)) * ell


def _resolve_ell(model, ell, seed, workers) -> float:
    if ell is None:
        return calibrate_scale(model, seed=seed, workers=workers).ell
    if not ell > 0:
        raise ConfigError("ell must be positive")
    return float(ell)


def estimate_harmonic(
    model: ChainModel,
    j0: int,
    y: float,
    n: int,
    paths: int,
    seed: int,
    ell: float | None = None,
    min_survivors: int = 100,
    workers: int | None = None,
) -> HarmonicEstimate:
    """``v_hat = n^(1-rho) l p_hat(n)`` with a 95% normal CI."""
    ell = _resolve_ell(model, ell, seed, workers)
    count = int(survival_counts(model, j0, [y], [n], paths, seed, workers)[0, 0])
    if count < min_survivors:
        raise StatisticalAbort(f"only {count} survivors at n={n}; need {min_survivors}")
    p = count / paths
    se = float(binomial_stderr(p, paths))
    c = _norm(model, n, ell)
    return HarmonicEstimate(
        v_hat=c * p, n_used=int(n), ci=(c * (p - 1.96 * se), c * (p + 1.96 * se)),
        scale_ell=ell, p_hat=p, stderr=c * se, survivors=count,
    )


@dataclass(frozen=True)
class HarmonicTable:
    """``v_hat(j, y)`` on a geometric y-grid, at horizons ``n`` and ``n - 1``.

    Values between grid points interpolate ``log v`` linearly in ``log y``;
    below the grid the first value is held; above it the growth law
    ``v(y_max) (y / y_max)^(alpha (1 - rho))`` is used.
    """

    y_grid: np.ndarray
    n: int
    norm: float
    growth_exponent: float
    paths: int
    p_n: np.ndarray
    p_prev: np.ndarray

    @property
    def v_hat(self) -> np.ndarray:
        return self.norm * self.p_n

    def _lookup(self, p_table, j, y):
        j = np.asarray(j)
        y = np.asarray(y, dtype=float)
        ly = np.log(self.y_grid)
        p = np.maximum(p_table, 0.5 / self.paths)
        se = binomial_stderr(np.minimum(p_table, 1.0), self.paths)
        rel = se / p
        lp = np.log(p)
        out = np.empty(y.shape)
        out_rel = np.empty(y.shape)
        lyq = np.log(np.clip(y, self.y_grid[0], self.y_grid[-1]))
        for state in np.unique(j):
            sel = j == state
            out[sel] = np.interp(lyq[sel], ly, lp[state])
            out_rel[sel] = np.interp(lyq[sel], ly, rel[state])
        above = y > self.y_grid[-1]
        out[above] += self.growth_exponent * (np.log(y[above]) - ly[-1])
        v = self.norm * np.exp(out)
        return v, v * out_rel, above

    def value(self, j, y, horizon: str = "n"):
        """``(v, se, extrapolated)`` at hidden states ``j`` and levels ``y > 0``."""
        table = self.p_n if horizon == "n" else self.p_prev
        return self._lookup(table, j, y)

    def index(self, y: float) -> int:
        hit = np.nonzero(np.isclose(self.y_grid, y, rtol=1e-12, atol=0))[0]
        if hit.size == 0:
            raise ConfigError(f"y={y} is not a grid point")
        return int(hit[0])


def geometric_grid(y_min: float, y_max: float, per_octave: int = 2) -> np.ndarray:
    k0 = math.floor(per_octave * math.log2(y_min) + 1e-9)
    k1 = math.ceil(per_octave * math.log2(y_max) - 1e-9)
    return 2.0 ** (np.arange(k0, k1 + 1) / per_octave)


def harmonic_table(
    model: ChainModel,
    y_grid,
    n: int,
    paths: int,
    seed: int,
    ell: float | None = None,
    workers: int | None = None,
) -> HarmonicTable:
    """Tabulate ``v_hat(j, y)`` for every hidden state on shared paths.

    State ``j`` uses substreams keyed by ``seed + j``.
    """
    y_grid = np.asarray(y_grid, dtype=float)
    if y_grid.ndim != 1 or y_grid.size < 2 or np.any(y_grid <= 0) or np.any(np.diff(y_grid) <= 0):
        raise ConfigError("y_grid must hold at least 2 increasing positive levels")
    if n < 2:
        raise ConfigError("n must be >= 2")
    ell = _resolve_ell(model, ell, seed, workers)
    p_n = np.empty((model.states, y_grid.size))
    p_prev = np.empty_like(p_n)
    for j in range(model.states):
        counts = survival_counts(model, j, y_grid, [n - 1, n], paths, seed + j, workers)
        p_prev[j] = counts[:, 0] / paths
        p_n[j] = counts[:, 1] / paths
    rho = model_rho(model)
    return HarmonicTable(
        y_grid=y_grid, n=int(n), norm=_norm(model, n, ell), growth_exponent=model.alpha * (1.0 - rho),
        paths=int(paths), p_n=p_n, p_prev=p_prev,
    )


@dataclass(frozen=True)
class OneStepExpectation:
    mean: float
    stderr_sampling: float
    stderr_table: float
    extrapolated_fraction: float
    samples: int


def one_step_expectation(model: ChainModel, j0: int, y: float, v_func, samples: int, seed: int) -> OneStepExpectation:
    """Monte Carlo ``E_j0[v(J_1, y + S_1); tau_y > 1]``.

    ``v_func(states, levels)`` returns ``(values, stderr, extrapolated)`` for
    levels ``> 0``; ``stderr`` is propagated as if fully correlated.
    """
    rng = _mc.substream(seed, 3, j0)
    j1 = np.searchsorted(model.cum_transition[j0], rng.random(samples), side="right")
    j1 = np.minimum(j1, model.states - 1)
    neg, pos, x0, center = (a[j1] for a in model.law_arrays())
    from .chain import _quantile

    xi = _quantile(rng.random(samples), neg, pos, x0, center, 1.0 / model.alpha)
    level = y + xi
    alive = level > 0
    vals = np.zeros(samples)
    ses = np.zeros(samples)
    extrap = 0
    if alive.any():
        v, se, ex = v_func(j1[alive], level[alive])
        vals[alive] = v
        ses[alive] = se
        extrap = int(np.count_nonzero(ex))
    frac = extrap / max(1, int(alive.sum()))
    return OneStepExpectation(
        mean=float(vals.mean()),
        stderr_sampling=float(vals.std(ddof=1) / math.sqrt(samples)),
        stderr_table=float(ses.mean()),
        extrapolated_fraction=frac,
        samples=int(samples),
    )


@dataclass(frozen=True)
class HarmonicityReport:
    j0: int
    y: float
    lhs: float
    rhs: float
    residual: float
    relative_residual: float
    combined_stderr: float
    lhs_stderr: float
    rhs_stderr: float
    extrapolated_fraction: float

    @property
    def z(self) -> float:
        return abs(self.residual) / self.combined_stderr if self.combined_stderr > 0 else math.inf

    def passes(self, sigmas: float = 3.0) -> bool:
        # slack for rounding when both sides are (nearly) deterministic
        return abs(self.residual) <= sigmas * self.combined_stderr + 1e-12 * abs(self.lhs)


def check_harmonicity(
    model: ChainModel,
    table: HarmonicTable,
    j0: int,
    y: float,
    samples: int = 1_000_000,
    seed: int = 0,
    max_extrapolated: float = 0.5,
) -> HarmonicityReport:
    """Compare ``v_hat(j0, y)`` with ``E_j0[v_hat(J_1, y + S_1); tau_y > 1]``.

    The inner values come from the horizon ``n - 1`` column of the table,
    which makes the identity exact at finite ``n`` by the Markov property;
    only Monte Carlo error and interpolation in ``y`` remain.
    """
    i = table.index(y)
    p = table.p_n[j0, i]
    lhs = table.norm * p
    lhs_se = table.norm * float(binomial_stderr(p, table.paths))
    step = one_step_expectation(model, j0, y, lambda j, lv: table.value(j, lv, "n-1"), samples, seed)
    if step.extrapolated_fraction > max_extrapolated:
        raise StatisticalAbort(
            f"{step.extrapolated_fraction:.0%} of one-step levels lie above the grid; extend y_grid"
        )
    rhs_se = math.hypot(step.stderr_sampling, step.stderr_table)
    resid = lhs - step.mean
    return HarmonicityReport(
        j0=int(j0), y=float(y), lhs=lhs, rhs=step.mean, residual=resid,
        relative_residual=resid / lhs if lhs > 0 else math.inf,
        combined_stderr=math.hypot(lhs_se, rhs_se), lhs_stderr=lhs_se, rhs_stderr=rhs_se,
        extrapolated_fraction=step.extrapolated_fraction,
    )


@dataclass(frozen=True)
class GrowthFit:
    slope: float
    h_hat: float
    ci: tuple
    slope_stderr: float
    y: np.ndarray
    v_hat: np.ndarray
    used: np.ndarray = field(repr=False)


def growth_fit_from_values(y, v, se=None, used=None) -> GrowthFit:
    """Regress ``log v`` on ``log y``; ``h_hat = exp(intercept)``."""
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    used = np.ones(y.size, bool) if used is None else np.asarray(used, bool)
    weights = None
    if se is not None:
        se = np.asarray(se, dtype=float)
        if np.all(se[used] > 0):
            weights = (v[used] / se[used]) ** 2
    fit = loglog_fit(y[used], v[used], weights, absolute_sigma=weights is not None)
    ci = (fit.slope - 1.96 * fit.slope_stderr, fit.slope + 1.96 * fit.slope_stderr)
    return GrowthFit(
        slope=fit.slope, h_hat=math.exp(fit.intercept), ci=ci, slope_stderr=fit.slope_stderr,
        y=y, v_hat=v, used=used,
    )


def harmonic_growth_fit(
    model: ChainModel,
    j0: int,
    y_grid,
    n: int,
    paths: int,
    seed: int,
    ell: float | None = None,
    p_max: float = 0.5,
    workers: int | None = None,
) -> GrowthFit:
    """Growth exponent of ``y -> v_hat(j0, y)`` at fixed ``n``.

    Levels whose survival estimate exceeds ``p_max`` are outside the
    asymptotic regime (``y`` comparable to ``n^(1/alpha)``) and are dropped
    with a warning, as are levels without survivors.
    """
    y_grid = np.asarray(y_grid, dtype=float)
    if y_grid.size < 5:
        raise ConfigError("growth fit needs a y-grid of at least 5 points")
    if np.any(y_grid <= 0) or np.any(np.diff(y_grid) <= 0):
        raise ConfigError("y_grid must be increasing and positive")
    ell = _resolve_ell(model, ell, seed, workers)
    counts = survival_counts(model, j0, y_grid, [n], paths, seed, workers)[:, 0]
    p = counts / paths
    c = _norm(model, n, ell)
    used = (p <= p_max) & (counts > 0)
    if (~used).any():
        warnings.warn(f"dropping levels {y_grid[~used].tolist()} from the growth fit", stacklevel=2)
    if used.sum() < 3:
        raise StatisticalAbort("fewer than 3 usable levels for the growth fit")
    return growth_fit_from_values(y_grid, c * p, c * binomial_stderr(p, paths), used)


# ----------------------------------------------------------------------------
# conditioned endpoints


@dataclass(frozen=True)
class ConditionedSamples:
    values: np.ndarray
    acceptance_rate: float
    simulated: int
    accepted: int
    normalization: float

    @property
    def acceptance_stderr(self) -> float:
        return float(binomial_stderr(self.acceptance_rate, self.simulated))


def conditioned_endpoint_samples(
    model: ChainModel,
    j0: int,
    y: float,
    n: int,
    count: int,
    seed: int,
    ell: float | None = None,
    floor: float = 1e-6,
    workers: int | None = None,
) -> ConditionedSamples:
    """Rescaled endpoints ``S_n / (n^(1/alpha) l)`` of walks with ``tau_y > n``."""
    if count < 1000:
        raise ConfigError("count must be >= 1000")
    if not y > 0:
        raise ConfigError("y must be positive")
    ell = _resolve_ell(model, ell, seed, workers)
    res = _mc.rejection_endpoints(ChainIncrements(model, j0), n, y, count, seed, floor=floor, workers=workers)
    norm = n ** (1.0 / model.alpha) * ell
    return ConditionedSamples(
        values=res.values / norm, acceptance_rate=res.acceptance_rate,
        simulated=res.simulated, accepted=res.accepted, normalization=norm,
    )


# ----------------------------------------------------------------------------
# walk versus martingale


@dataclass(frozen=True)
class MartingaleIncrements:
    """Engine source yielding the martingale increments coupled to the walk."""

    model: ChainModel
    solution: PoissonSolution
    j0: int | None = 0

    def initial_state(self, size, seed, block):
        return ChainIncrements(self.model, self.j0).initial_state(size, seed, block)

    def draws(self, gen, size, length):
        return ChainIncrements(self.model, self.j0).draws(gen, size, length)

    def advance(self, draws, state):
        inc, seq, new_state = ChainIncrements(self.model, self.j0).advance(draws, state)
        prev = np.column_stack([state, seq[:, :-1]])
        r = self.solution.r_state
        return inc - self.solution.nu_f + r[seq] - r[prev], seq, new_state


def martingale_survival(
    model: ChainModel, solution: PoissonSolution, cfg: ExitConfig, workers: int | None = None
) -> SurvivalTable:
    """``P_j0(min_k (y + M_k) > 0, k <= n)`` on the same draws as :func:`estimate_survival`."""
    res = _mc.run_exit(
        MartingaleIncrements(model, solution, cfg.j0), np.asarray(cfg.n_grid), cfg.y, cfg.paths, cfg.seed, workers
    )
    return SurvivalTable.from_counts(cfg.n_grid, res.survivor_counts(cfg.y), cfg.paths, cfg.y)


@dataclass(frozen=True)
class SandwichCounts:
    """Survivor counts for ``min (y + M_k) > 2 K_n`` (inner), the walk, and
    ``min (y + M_k) > -2 K_n`` (outer), with ``K_n = max_{0<=j<=n} |r(J_j)|``."""

    n: np.ndarray
    inner: np.ndarray
    walk: np.ndarray
    outer: np.ndarray
    violations: int


def sandwich_counts(
    model: ChainModel, solution: PoissonSolution, j0: int, y: float, n_grid, paths: int, seed: int
) -> SandwichCounts:
    n_grid = _check_grid(n_grid)
    states, inc = simulate_walks(model, j0, int(n_grid[-1]), paths, seed)
    s = np.cumsum(inc, axis=1)
    m = np.cumsum(martingale_increments(solution, states, inc), axis=1)
    k = np.maximum.accumulate(np.abs(solution.r_state)[states], axis=1)[:, 1:]
    min_s = np.minimum.accumulate(y + s, axis=1)
    min_m = np.minimum.accumulate(y + m, axis=1)
    cols = n_grid - 1
    inner = min_m[:, cols] > 2.0 * k[:, cols]
    walk = min_s[:, cols] > 0
    outer = min_m[:, cols] > -2.0 * k[:, cols]
    violations = int(np.count_nonzero(inner & ~walk) + np.count_nonzero(walk & ~outer))
    return SandwichCounts(
        n=n_grid, inner=inner.sum(0), walk=walk.sum(0), outer=outer.sum(0), violations=violations
    )
