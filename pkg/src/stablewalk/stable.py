"""Strictly alpha-stable laws: sampling, positivity parameter, discretized
stable paths, first-passage tails and discretized meanders."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _mc
from .errors import ConfigError
from .stats import binomial_stderr

__all__ = [
    "MeanderDraws",
    "MeanderSample",
    "StableIncrements",
    "StableParams",
    "SurvivalCurve",
    "positivity_parameter",
    "sample_meander_endpoint",
    "sample_stable_path",
    "sample_standard_stable",
    "stable_survival_estimate",
    "stable_tail_constant",
]


def _check_alpha_beta(alpha: float, beta: float) -> None:
    if not (1.0 < alpha <= 2.0) or not math.isfinite(alpha):
        raise ConfigError(f"alpha must lie in (1, 2], got {alpha}")
    if not (-1.0 <= beta <= 1.0):
        raise ConfigError(f"beta must lie in [-1, 1], got {beta}")


def positivity_parameter(alpha: float, beta: float) -> float:
    """``P(Z > 0)`` for the strictly stable law with index ``alpha`` and skew
    ``beta``: ``1/2 + arctan(beta tan(pi alpha / 2)) / (pi alpha)``."""
    _check_alpha_beta(alpha, beta)
    if alpha == 2.0:
        return 0.5
    return 0.5 + math.atan(beta * math.tan(math.pi * alpha / 2.0)) / (math.pi * alpha)


def stable_tail_constant(alpha: float) -> float:
    """``C_alpha`` with ``P(|Z| > x) ~ C_alpha x^-alpha`` for unit scale."""
    return (1.0 - alpha) / (math.gamma(2.0 - alpha) * math.cos(math.pi * alpha / 2.0))


@dataclass(frozen=True)
class StableParams:
    """Index, skew and scale of a strictly stable law.

    Characteristic function ``exp(-|s t|^alpha (1 - i beta sign(t) tan(pi alpha/2)))``
    with ``s = scale``. ``alpha = 2`` is the Gaussian endpoint (variance
    ``2 scale^2``) and is flagged ``degenerate``.
    """

    alpha: float
    beta: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        _check_alpha_beta(self.alpha, self.beta)
        if not (self.scale > 0.0) or not math.isfinite(self.scale):
            raise ConfigError(f"scale must be positive, got {self.scale}")

    @property
    def rho(self) -> float:
        return positivity_parameter(self.alpha, self.beta)

    @property
    def degenerate(self) -> bool:
        return self.alpha == 2.0


def _cms(alpha: float, beta: float, v, w):
    # Chambers-Mallows-Stuck, alpha != 1; v ~ U(-pi/2, pi/2), w ~ Exp(1).
    zeta = beta * math.tan(math.pi * alpha / 2.0)
    b = math.atan(zeta) / alpha
    s = (1.0 + zeta * zeta) ** (1.0 / (2.0 * alpha))
    av = alpha * (v + b)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        x = s * np.sin(av) / np.cos(v) ** (1.0 / alpha) * (np.cos(v - av) / w) ** ((1.0 - alpha) / alpha)
    return x


def sample_standard_stable(params: StableParams, rng: np.random.Generator, size=None):
    """Draw from the strictly stable law ``params``. Returns a float when
    ``size`` is None, else an array."""
    v = rng.uniform(-math.pi / 2.0, math.pi / 2.0, size=size)
    w = rng.standard_exponential(size=size)
    x = params.scale * _cms(params.alpha, params.beta, v, w)
    return float(x) if size is None else x


@dataclass(frozen=True)
class StableIncrements:
    """I.i.d. stable increments of a fixed per-step scale; engine source."""

    params: StableParams
    step_scale: float = 1.0

    def initial_state(self, size, seed, block):
        return None

    def draws(self, gen, size, length):
        return gen.random((size, length)), gen.random((size, length))

    def advance(self, draws, state):
        u_v, u_w = draws
        v = math.pi * (u_v - 0.5)
        w = -np.log1p(-u_w)
        inc = (self.params.scale * self.step_scale) * _cms(self.params.alpha, self.params.beta, v, w)
        return inc, None, None


def sample_stable_path(params: StableParams, steps: int, horizon: float, rng: np.random.Generator) -> np.ndarray:
    """Values of a stable Levy path at ``horizon * k / steps``, ``k = 1..steps``."""
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    if not horizon > 0:
        raise ConfigError("horizon must be positive")
    dt = horizon / steps
    return np.cumsum(dt ** (1.0 / params.alpha) * sample_standard_stable(params, rng, size=steps))


@dataclass(frozen=True)
class SurvivalCurve:
    """Rows ``(t, p_hat, stderr)`` of a first-passage survival estimate."""

    t: np.ndarray
    p_hat: np.ndarray
    stderr: np.ndarray
    survivors: np.ndarray
    paths: int


def stable_survival_estimate(
    params: StableParams,
    y: float,
    t_grid,
    steps_per_unit: int,
    paths: int,
    seed: int,
    workers: int | None = None,
) -> SurvivalCurve:
    """Fraction of discretized stable paths with ``y + Z(s) > 0`` at every grid
    time ``s <= t``. Jumps across the barrier between grid points are not
    detected."""
    if not y > 0:
        raise ConfigError("y must be positive")
    if paths <= 0:
        raise ConfigError("paths must be positive")
    if steps_per_unit < 1:
        raise ConfigError("steps_per_unit must be >= 1")
    t = np.asarray(t_grid, dtype=float)
    if t.ndim != 1 or t.size == 0 or np.any(t <= 0) or np.any(np.diff(t) <= 0):
        raise ConfigError("t_grid must be increasing and positive")
    steps = np.floor(t * steps_per_unit + 1e-9).astype(np.int64)
    survivors = np.full(t.size, paths, dtype=np.int64)
    checked = steps >= 1
    if checked.any():
        ks = np.unique(steps[checked])
        source = StableIncrements(params, step_scale=(1.0 / steps_per_unit) ** (1.0 / params.alpha))
        res = _mc.run_exit(source, ks, y, paths, seed, workers=workers)
        counts = dict(zip(ks.tolist(), res.survivor_counts(y).tolist()))
        survivors[checked] = [counts[k] for k in steps[checked].tolist()]
    p = survivors / paths
    return SurvivalCurve(t=t, p_hat=p, stderr=binomial_stderr(p, paths), survivors=survivors, paths=int(paths))


@dataclass(frozen=True)
class MeanderSample:
    value: float
    grid_steps: int

    def __post_init__(self):
        if not self.value > 0:
            raise ValueError("meander samples are strictly positive")
        if self.grid_steps < 2:
            raise ValueError("grid_steps must be >= 2")


@dataclass(frozen=True)
class MeanderDraws:
    """Accepted endpoints of positivity-conditioned stable paths on ``[0, 1]``."""

    values: np.ndarray
    grid_steps: int
    acceptance_rate: float
    simulated: int
    accepted: int = field(default=0)

    def __len__(self):
        return self.values.size

    def __iter__(self):
        return (MeanderSample(float(v), self.grid_steps) for v in self.values)


def sample_meander_endpoint(
    params: StableParams,
    grid_steps: int,
    count: int,
    seed: int,
    floor: float = 1e-6,
    probe_paths: int = 2 * _mc.BLOCK_SIZE,
    workers: int | None = None,
) -> MeanderDraws:
    """Rejection sampler for the discretized stable meander at time 1.

    A path on the grid ``{k / grid_steps}`` started at 0 is accepted iff all
    of its grid positions are strictly positive.

    Raises
    ------
    AcceptanceFloorError
        If the acceptance rate over the probe batch is below ``floor``.
    """
    if grid_steps < 2:
        raise ConfigError("grid_steps must be >= 2")
    if count < 1:
        raise ConfigError("count must be >= 1")
    source = StableIncrements(params, step_scale=(1.0 / grid_steps) ** (1.0 / params.alpha))
    res = _mc.rejection_endpoints(
        source, grid_steps, 0.0, count, seed, floor=floor, probe_paths=probe_paths, workers=workers
    )
    return MeanderDraws(
        values=res.values,
        grid_steps=int(grid_steps),
        acceptance_rate=res.acceptance_rate,
        simulated=res.simulated,
        accepted=res.accepted,
    )
