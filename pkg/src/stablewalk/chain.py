"""Finite hidden Markov chains modulating two-sided Pareto increments.

The chain state is ``X_n = (J_n, xi_n)``: ``J`` moves by the transition
matrix and ``xi_n`` is drawn from the law attached to ``J_n``. The walk is
``S_n = xi_1 + ... + xi_n``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from . import _mc
from .errors import ConfigError, ModelError
from .stable import stable_tail_constant
from .stats import hill_estimator

__all__ = [
    "ChainIncrements",
    "ChainModel",
    "HillResult",
    "ParetoIncrementLaw",
    "WalkPath",
    "build_model",
    "check_stochastic",
    "hill_tail_check",
    "load_model",
    "model_from_dict",
    "save_model",
    "simulate_walk",
    "simulate_walks",
    "stable_limit_scale",
    "stationary_distribution",
]

MODEL_SCHEMA = "stablewalk/model-v1"
MAX_STATES = 64


@dataclass(frozen=True)
class ParetoIncrementLaw:
    """Uniform core on ``[-x0, x0]`` with Pareto tails, shifted by ``center``.

    ``weight_pos`` and ``weight_neg`` are the probabilities of the right and
    left tails: ``P(xi - center > x) = weight_pos (x / x0)^-alpha`` for
    ``x > x0``, and symmetrically on the left. The core carries the rest.
    """

    alpha: float
    weight_pos: float
    weight_neg: float
    cutoff: float = 1.0
    center: float = 0.0

    def __post_init__(self):
        if not (1.0 < self.alpha < 2.0):
            raise ConfigError(f"increment tail index must lie in (1, 2), got {self.alpha}")
        if self.weight_pos < 0 or self.weight_neg < 0:
            raise ConfigError("tail weights must be nonnegative")
        if not self.weight_pos + self.weight_neg > 0:
            raise ConfigError("at least one tail weight must be positive")
        if self.weight_pos + self.weight_neg > 1.0 + 1e-15:
            raise ConfigError("tail weights must sum to at most 1")
        if not (self.cutoff > 0 and math.isfinite(self.cutoff)):
            raise ConfigError("cutoff must be positive")
        if not math.isfinite(self.center):
            raise ConfigError("center must be finite")

    @property
    def core_mass(self) -> float:
        return max(0.0, 1.0 - self.weight_pos - self.weight_neg)

    @property
    def mean(self) -> float:
        a = self.alpha
        return self.center + (self.weight_pos - self.weight_neg) * a * self.cutoff / (a - 1.0)

    @property
    def tail_constant(self) -> float:
        """``c`` in ``P(|xi| > x) ~ c x^-alpha``."""
        return (self.weight_pos + self.weight_neg) * self.cutoff**self.alpha

    def shifted(self, delta: float) -> ParetoIncrementLaw:
        return ParetoIncrementLaw(self.alpha, self.weight_pos, self.weight_neg, self.cutoff, self.center + delta)

    def scaled(self, factor: float) -> ParetoIncrementLaw:
        return ParetoIncrementLaw(
            self.alpha, self.weight_pos, self.weight_neg, self.cutoff * factor, self.center * factor
        )

    def cdf(self, x):
        z = np.asarray(x, dtype=float) - self.center
        x0, a = self.cutoff, self.alpha
        out = np.empty_like(z)
        left = z < -x0
        right = z > x0
        mid = ~(left | right)
        out[left] = self.weight_neg * (-z[left] / x0) ** -a
        out[mid] = self.weight_neg + self.core_mass * (z[mid] + x0) / (2.0 * x0)
        out[right] = 1.0 - self.weight_pos * (z[right] / x0) ** -a
        return out if out.ndim else float(out)

    def quantile(self, u):
        return _quantile(np.asarray(u, dtype=float), self.weight_neg, self.weight_pos, self.cutoff, self.center, 1.0 / self.alpha)

    def sample(self, rng: np.random.Generator, size=None):
        return self.quantile(rng.random(size))

    def to_dict(self) -> dict:
        return {
            "weight_pos": self.weight_pos,
            "weight_neg": self.weight_neg,
            "cutoff": self.cutoff,
            "center": self.center,
        }


def _quantile(u, neg, pos, x0, center, inv_alpha):
    # Inverse CDF of the core/tail mixture, parameters broadcast against u.
    u, neg, pos, x0, center = np.broadcast_arrays(u, neg, pos, x0, center)
    out = np.empty(u.shape)
    left = u < neg
    right = u >= 1.0 - pos
    mid = ~(left | right)
    ul = np.maximum(u[left], 2.0**-60 * neg[left])
    out[left] = -x0[left] * (ul / neg[left]) ** -inv_alpha
    out[right] = x0[right] * ((1.0 - u[right]) / pos[right]) ** -inv_alpha
    core = 1.0 - neg[mid] - pos[mid]
    out[mid] = x0[mid] * (2.0 * (u[mid] - neg[mid]) / core - 1.0)
    out += center
    return out


@numba.njit(cache=True)
def _step_hidden(u, cum, start):
    a, length = u.shape
    width = cum.shape[1]
    out = np.empty((a, length), np.int64)
    for i in range(a):
        s = start[i]
        for k in range(length):
            x = u[i, k]
            j = 0
            while j < width - 1 and x >= cum[s, j]:
                j += 1
            s = j
            out[i, k] = s
    return out


def check_stochastic(transition, tol: float = 1e-12) -> np.ndarray:
    """Validate a square row-stochastic matrix; returns it as float array."""
    p = np.asarray(transition, dtype=float)
    if p.ndim != 2 or p.shape[0] != p.shape[1] or p.shape[0] == 0:
        raise ModelError(f"transition must be a nonempty square matrix, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ModelError("transition entries must be finite and nonnegative")
    dev = np.max(np.abs(p.sum(axis=1) - 1.0))
    if dev > tol:
        raise ModelError(f"transition rows must sum to 1 (max deviation {dev:.3g})")
    return p


def _is_primitive(p: np.ndarray) -> bool:
    # Wielandt: a primitive J x J pattern has a positive power at (J-1)^2 + 1.
    j = p.shape[0]
    a = (p > 0).astype(np.int64)
    m = a.copy()
    power = 1
    target = (j - 1) ** 2 + 1
    while power < target:
        m = ((m @ a) > 0).astype(np.int64)
        power += 1
    return bool(np.all(m > 0))


def stationary_distribution(transition, tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    """Left fixed point of an irreducible aperiodic stochastic matrix.

    Solved directly, then confirmed by power iteration from the uniform
    vector; disagreement means the chain is reducible or periodic.
    """
    p = check_stochastic(transition)
    j = p.shape[0]
    if j == 1:
        return np.ones(1)
    a = (np.eye(j) - p).T
    a[-1, :] = 1.0
    b = np.zeros(j)
    b[-1] = 1.0
    try:
        pi = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise ModelError("stationary distribution is not unique (reducible chain)") from exc
    q = np.full(j, 1.0 / j)
    for _ in range(max_iter):
        nxt = q @ p
        if np.max(np.abs(nxt - q)) < tol:
            q = nxt
            break
        q = nxt
    else:
        raise ModelError("power iteration did not converge (periodic or reducible chain)")
    if np.max(np.abs(q - pi)) > 1e-8 or np.any(pi < -1e-12):
        raise ModelError("power iteration disagrees with the direct solve (reducible chain)")
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def _second_eigen_modulus(p: np.ndarray) -> float:
    if p.shape[0] == 1:
        return 0.0
    ev = np.linalg.eigvals(p)
    ev = ev[np.argsort(-np.abs(ev))]
    return float(np.abs(ev[1]))


@dataclass(frozen=True, eq=False)
class ChainModel:
    """Immutable centred Markov-modulated Pareto walk; built by :func:`build_model`."""

    transition: np.ndarray
    laws: tuple
    raw_laws: tuple
    pi: np.ndarray
    gap: float
    skew_beta: float
    alpha: float

    @property
    def states(self) -> int:
        return self.transition.shape[0]

    @property
    def cond_means(self) -> np.ndarray:
        """``m(j) = E[xi | J = j]`` for the centred laws."""
        return np.array([law.mean for law in self.laws])

    @property
    def stationary_mean(self) -> float:
        return float(self.pi @ self.cond_means)

    @property
    def cum_transition(self) -> np.ndarray:
        cum = np.cumsum(self.transition, axis=1)
        cum[:, -1] = 1.0
        return cum

    def law_arrays(self):
        """Per-state ``(weight_neg, weight_pos, cutoff, center)`` arrays."""
        return tuple(
            np.array([getattr(law, f) for law in self.laws])
            for f in ("weight_neg", "weight_pos", "cutoff", "center")
        )

    def to_dict(self) -> dict:
        return {
            "schema": MODEL_SCHEMA,
            "alpha": self.alpha,
            "transition": self.transition.tolist(),
            "laws": [law.to_dict() for law in self.raw_laws],
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def __eq__(self, other):
        return isinstance(other, ChainModel) and self.to_dict() == other.to_dict()

    def scaled(self, factor: float) -> ChainModel:
        return build_model(self.transition, [law.scaled(factor) for law in self.raw_laws])


def build_model(transition, raw_laws, max_states: int = MAX_STATES) -> ChainModel:
    """Validate a hidden chain and its increment laws and centre the walk.

    A common additive shift is applied to every law so that the stationary
    mean increment is zero; tail weights are untouched.

    Raises
    ------
    ModelError
        Non-stochastic, reducible or periodic transition; mixed tail
        indices; too many states; zero spectral gap.
    """
    p = check_stochastic(transition)
    j = p.shape[0]
    if j > max_states:
        raise ModelError(f"{j} hidden states exceed the cap of {max_states}")
    laws = tuple(raw_laws)
    if len(laws) != j:
        raise ModelError(f"{len(laws)} laws given for {j} hidden states")
    alphas = {law.alpha for law in laws}
    if len(alphas) != 1:
        raise ModelError(f"all states must share one tail index, got {sorted(alphas)}")
    alpha = alphas.pop()
    if not _is_primitive(p):
        raise ModelError("hidden chain must be irreducible and aperiodic")
    pi = stationary_distribution(p)
    gap = 1.0 - _second_eigen_modulus(p)
    if not gap > 0:
        raise ModelError("spectral gap is zero")
    shift = -float(pi @ np.array([law.mean for law in laws]))
    centred = tuple(law.shifted(shift) for law in laws)
    tails = np.array([law.cutoff**alpha for law in laws])
    cp = np.array([law.weight_pos for law in laws]) * tails
    cn = np.array([law.weight_neg for law in laws]) * tails
    skew = float(pi @ (cp - cn) / (pi @ (cp + cn)))
    return ChainModel(
        transition=p,
        laws=centred,
        raw_laws=laws,
        pi=pi,
        gap=float(gap),
        skew_beta=min(1.0, max(-1.0, skew)),
        alpha=float(alpha),
    )


def iid_model(law: ParetoIncrementLaw) -> ChainModel:
    """Single-state model: an i.i.d. walk."""
    return build_model([[1.0]], [law])


def model_from_dict(data: dict) -> ChainModel:
    if data.get("schema", MODEL_SCHEMA) != MODEL_SCHEMA:
        raise ConfigError(f"unsupported model schema {data.get('schema')!r}")
    try:
        alpha = float(data["alpha"])
        laws = [
            ParetoIncrementLaw(
                alpha,
                float(d["weight_pos"]),
                float(d["weight_neg"]),
                float(d.get("cutoff", 1.0)),
                float(d.get("center", 0.0)),
            )
            for d in data["laws"]
        ]
        transition = data["transition"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed model description: {exc}") from exc
    return build_model(transition, laws)


def save_model(model: ChainModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_model(path) -> ChainModel:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"model file {path} is not valid JSON: {exc}") from exc
    return model_from_dict(data)


def stable_limit_scale(model: ChainModel) -> float:
    """Scale ``l`` with ``S_n / n^(1/alpha) -> l Z``, from the tail constants.

    The limiting Levy measure is the ``pi``-mixture of the per-state tails,
    so ``l^alpha = sum_j pi_j c_j / C_alpha``.
    """
    c = float(model.pi @ np.array([law.tail_constant for law in model.laws]))
    return (c / stable_tail_constant(model.alpha)) ** (1.0 / model.alpha)


@dataclass(frozen=True)
class ChainIncrements:
    """Engine source for a chain model. ``j0=None`` starts from ``pi``."""

    model: ChainModel
    j0: int | None = 0

    def __post_init__(self):
        if self.j0 is not None and not (0 <= self.j0 < self.model.states):
            raise ConfigError(f"initial state {self.j0} out of range")

    def initial_state(self, size, seed, block):
        if self.j0 is not None:
            return np.full(size, self.j0, dtype=np.int64)
        u = _mc.substream(seed, _mc._INIT_KEY, block).random(size)
        cum = np.cumsum(self.model.pi)
        return np.minimum(np.searchsorted(cum, u, side="right"), self.model.states - 1).astype(np.int64)

    def draws(self, gen, size, length):
        if self.model.states == 1:
            return (gen.random((size, length)),)
        return gen.random((size, length)), gen.random((size, length))

    def advance(self, draws, state):
        model = self.model
        if model.states == 1:
            (u,) = draws
            law = model.laws[0]
            inc = _quantile(u, law.weight_neg, law.weight_pos, law.cutoff, law.center, 1.0 / model.alpha)
            seq = np.broadcast_to(state[:, None], u.shape)
            return inc, seq, state
        u_state, u = draws
        seq = _step_hidden(u_state, model.cum_transition, state)
        neg, pos, x0, center = (a[seq] for a in model.law_arrays())
        inc = _quantile(u, neg, pos, x0, center, 1.0 / model.alpha)
        return inc, seq, seq[:, -1].copy()


@dataclass(frozen=True)
class WalkPath:
    """``hidden_states = J_0..J_n``, ``increments = xi_1..xi_n``, ``partial_sums = S_1..S_n``."""

    hidden_states: np.ndarray
    increments: np.ndarray
    partial_sums: np.ndarray

    def __post_init__(self):
        if self.hidden_states.size != self.increments.size + 1:
            raise ValueError("need one more hidden state than increments")


def simulate_walks(model: ChainModel, j0: int | None, n: int, paths: int, seed: int, workers=None):
    """Batch trajectories: ``(states (paths, n+1), increments (paths, n))``."""
    return _mc.simulate_paths(ChainIncrements(model, j0), n, paths, seed, workers=workers)


def simulate_walk(model: ChainModel, j0: int, n: int, seed: int, index: int = 0) -> WalkPath:
    """One trajectory; ``(seed, index)`` selects the substream."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    states, inc = _mc.simulate_paths(ChainIncrements(model, j0), n, 1, seed, workers=1, first_block=index)
    inc = inc[0]
    return WalkPath(hidden_states=np.asarray(states[0]), increments=inc, partial_sums=np.cumsum(inc))


@dataclass(frozen=True)
class HillResult:
    alpha_hat: float
    stderr: float
    k: int


def hill_tail_check(model: ChainModel, sample_size: int, k_fraction: float, seed: int) -> HillResult:
    """Hill estimate of the increment tail index from a stationary run."""
    k = int(round(sample_size * k_fraction))
    if k < 10:
        raise ConfigError(f"k = {k} exceedances; need at least 10")
    n = min(sample_size, 1024)
    paths = -(-sample_size // n)
    _, inc = simulate_walks(model, None, n, paths, seed)
    alpha_hat, se = hill_estimator(inc.ravel()[:sample_size], k)
    return HillResult(alpha_hat=alpha_hat, stderr=float(se), k=k)
