"""Block-parallel path simulation with deterministic substreams.

Paths are grouped in fixed blocks of ``BLOCK_SIZE``; time is cut into a fixed
chunk schedule. The uniforms for (block, chunk) come from their own
substream and are always drawn for the whole block, so the increments seen by
path ``i`` at step ``k`` do not depend on the barrier, on which other paths
are still alive, or on the worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from typing import Protocol

import numpy as np

BLOCK_SIZE = 8192
_HEAD_CHUNKS = (1, 1, 2, 4, 8, 16, 32, 64, 128)
MAX_CHUNK = 256

_CHUNK_KEY = 0
_INIT_KEY = 1

WORKERS_ENV = "STABLEWALK_WORKERS"


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, *key)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.SFC64(ss))


def chunk_schedule(n: int) -> list[int]:
    out: list[int] = []
    t = 0
    for c in _HEAD_CHUNKS:
        if t >= n:
            return out
        out.append(min(c, n - t))
        t += out[-1]
    while t < n:
        out.append(min(MAX_CHUNK, n - t))
        t += out[-1]
    return out


def block_layout(paths: int, first_block: int = 0) -> list[tuple[int, int, int]]:
    """``(block_id, first_path, size)`` triples covering ``paths`` paths."""
    out = []
    for i, start in enumerate(range(0, paths, BLOCK_SIZE)):
        out.append((first_block + i, start, min(BLOCK_SIZE, paths - start)))
    return out


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def map_blocks(fn, tasks, workers: int | None = None) -> list:
    workers = default_workers() if workers is None else max(1, int(workers))
    if workers == 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        return list(pool.map(fn, tasks))


class IncrementSource(Protocol):
    def initial_state(self, size: int, seed: int, block: int): ...

    def draws(self, gen: np.random.Generator, size: int, length: int) -> tuple: ...

    def advance(self, draws: tuple, state): ...


def _take(state, idx):
    return None if state is None else state[idx]


@dataclass(frozen=True)
class ExitSample:
    """Checkpointed running minima and positions of simulated walks.

    ``min_at[i, g]`` is ``min_{1<=k<=n_g} S_k`` for path ``i``; once a path is
    killed (running minimum at or below ``-y_kill``) later checkpoints carry
    the minimum reached so far, which is already below every admissible
    barrier. ``end_at[i, g]`` is ``S_{n_g}``, NaN when the path was killed
    before ``n_g``.
    """

    checkpoints: np.ndarray
    min_at: np.ndarray
    end_at: np.ndarray
    y_kill: float

    @property
    def paths(self) -> int:
        return self.min_at.shape[0]

    def survived(self, y: float) -> np.ndarray:
        if y > self.y_kill:
            raise ValueError(f"barrier y={y} exceeds the kill level {self.y_kill}")
        return self.min_at > -y

    def survivor_counts(self, y: float) -> np.ndarray:
        return self.survived(y).sum(axis=0)


def _exit_block(task, source, checkpoints, y_kill, seed):
    block, _, size = task
    n_max = int(checkpoints[-1])
    g_count = checkpoints.size
    s = np.zeros(size)
    mn = np.full(size, np.inf)
    state = source.initial_state(size, seed, block)
    min_at = np.full((size, g_count), np.nan)
    end_at = np.full((size, g_count), np.nan)
    alive = np.arange(size)
    t = 0
    for c, length in enumerate(chunk_schedule(n_max)):
        if alive.size == 0:
            break
        gen = substream(seed, _CHUNK_KEY, block, c)
        draws = source.draws(gen, size, length)
        inc, _, new_state = source.advance(tuple(d[alive] for d in draws), _take(state, alive))
        path = np.cumsum(inc, axis=1)
        path += s[alive, None]
        runmin = np.minimum.accumulate(path, axis=1)
        np.minimum(runmin, mn[alive, None], out=runmin)
        lo = np.searchsorted(checkpoints, t, side="right")
        hi = np.searchsorted(checkpoints, t + length, side="right")
        for g in range(lo, hi):
            col = checkpoints[g] - t - 1
            min_at[alive, g] = runmin[:, col]
            end_at[alive, g] = path[:, col]
        s[alive] = path[:, -1]
        mn[alive] = runmin[:, -1]
        if state is not None:
            state[alive] = new_state
        alive = alive[mn[alive] > -y_kill]
        t += length
    missing = np.isnan(min_at)
    if missing.any():
        rows = np.nonzero(missing)[0]
        min_at[missing] = mn[rows]
    return min_at, end_at


def run_exit(
    source,
    checkpoints,
    y_kill: float,
    paths: int,
    seed: int,
    workers: int | None = None,
    first_block: int = 0,
) -> ExitSample:
    """Simulate ``paths`` walks up to ``max(checkpoints)`` steps, dropping a
    path as soon as its running minimum reaches ``-y_kill``."""
    checkpoints = np.asarray(checkpoints, dtype=np.int64)
    if checkpoints.ndim != 1 or checkpoints.size == 0:
        raise ValueError("checkpoints must be a nonempty 1-D sequence")
    if np.any(checkpoints < 1) or np.any(np.diff(checkpoints) <= 0):
        raise ValueError("checkpoints must be strictly increasing positive integers")
    if paths < 1:
        raise ValueError("paths must be positive")
    fn = partial(_exit_block, source=source, checkpoints=checkpoints, y_kill=float(y_kill), seed=int(seed))
    parts = map_blocks(fn, block_layout(paths, first_block), workers)
    return ExitSample(
        checkpoints=checkpoints,
        min_at=np.concatenate([p[0] for p in parts]),
        end_at=np.concatenate([p[1] for p in parts]),
        y_kill=float(y_kill),
    )


def _path_block(task, source, n, seed):
    block, _, size = task
    state = source.initial_state(size, seed, block)
    start = None if state is None else state.copy()
    incs, states = [], []
    for c, length in enumerate(chunk_schedule(n)):
        gen = substream(seed, _CHUNK_KEY, block, c)
        inc, seq, state = source.advance(source.draws(gen, size, length), state)
        incs.append(inc)
        if seq is not None:
            states.append(seq)
    increments = np.concatenate(incs, axis=1)
    if start is None:
        return None, increments
    return np.column_stack([start] + states), increments


def simulate_paths(source, n: int, paths: int, seed: int, workers: int | None = None, first_block: int = 0):
    """Full trajectories on the same substream layout as :func:`run_exit`.

    Returns ``(states, increments)`` with shapes ``(paths, n + 1)`` and
    ``(paths, n)``; ``states`` is None for sources without hidden state.
    """
    if n < 1 or paths < 1:
        raise ValueError("n and paths must be positive")
    fn = partial(_path_block, source=source, n=int(n), seed=int(seed))
    parts = map_blocks(fn, block_layout(paths, first_block), workers)
    increments = np.concatenate([p[1] for p in parts])
    if parts[0][0] is None:
        return None, increments
    return np.concatenate([p[0] for p in parts]), increments


@dataclass(frozen=True)
class RejectionResult:
    values: np.ndarray
    accepted: int
    simulated: int

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.simulated


def rejection_endpoints(
    source,
    n: int,
    y: float,
    count: int,
    seed: int,
    floor: float = 1e-6,
    probe_paths: int = 2 * BLOCK_SIZE,
    max_paths: int = 10**8,
    workers: int | None = None,
) -> RejectionResult:
    """Endpoints ``S_n`` of walks with ``y + S_k > 0`` for all ``k <= n``.

    Rounds of fresh blocks are simulated until ``count`` paths are accepted;
    the first ``count`` accepted in path order are returned. The first round
    is a probe: if its acceptance rate is below ``floor`` the run aborts.
    """
    from .errors import AcceptanceFloorError

    if count < 1:
        raise ValueError("count must be positive")
    kept: list[np.ndarray] = []
    got = simulated = 0
    next_block = 0
    batch = max(BLOCK_SIZE, int(probe_paths))
    while got < count:
        res = run_exit(source, [n], y, batch, seed, workers=workers, first_block=next_block)
        next_block += len(block_layout(batch))
        ok = res.survived(y)[:, 0]
        kept.append(res.end_at[ok, 0])
        got += int(ok.sum())
        simulated += batch
        rate = got / simulated
        if simulated == batch and rate < floor:
            raise AcceptanceFloorError(rate, floor, simulated)
        if simulated >= max_paths and got < count:
            raise AcceptanceFloorError(rate, count / max_paths, simulated)
        need = (count - got) / max(rate, 1.0 / simulated)
        batch = int(min(max(1.2 * need, BLOCK_SIZE), max_paths - simulated, 64 * BLOCK_SIZE))
        batch = max(batch, 1)
    values = np.concatenate(kept)
    return RejectionResult(values=values[:count], accepted=got, simulated=simulated)
