"""Batch driver: ``stablewalk <command> --config run.toml``.

Every run writes into ``<out>/<command>-<digest>`` where the digest covers
the command, the config bytes, the model and the seed (not the worker
count). A run whose manifest already reports success is skipped unless
``--force`` is given. ``manifest.json`` is written on success and failure.

Exit statuses: 0 ok, 2 config error, 3 io error, 4 statistical abort or
failed verification.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
import time
import traceback
import warnings
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__, _mc
from .chain import ChainModel, check_stochastic, load_model, model_from_dict, simulate_walks
from .decomp import decomposition_error, remainder_sup_check, solve_poisson
from .errors import ConfigError, ModelError, StatisticalAbort
from .stable import StableParams, sample_meander_endpoint, sample_standard_stable
from .stats import binomial_stderr, ks_two_sample
from .survival import (
    ExitConfig,
    calibrate_scale,
    check_harmonicity,
    conditioned_endpoint_samples,
    estimate_survival,
    fit_exponent,
    geometric_grid,
    harmonic_growth_fit,
    harmonic_table,
    model_rho,
    sandwich_counts,
)

log = logging.getLogger("stablewalk")

CONFIG_SCHEMA = "stablewalk/config-v1"
EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_ABORT = 0, 2, 3, 4
COMMANDS = ("stable-sample", "survival", "harmonic", "meander", "verify")


@dataclass
class RunManifest:
    command: str
    config_digest: str | None
    model_digest: str | None
    seed: int | None
    version: str
    started: str
    wall_clock: float = 0.0
    outputs: dict = field(default_factory=dict)
    status: str = "running"
    exit_code: int | None = None
    message: str = ""


@dataclass
class RunContext:
    command: str
    section: dict
    models: list
    seed: int
    workers: int
    run_dir: Path
    base_dir: Path


# ----------------------------------------------------------------------------
# file helpers


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_value_csv(path) -> np.ndarray:
    """Read back a one-column ``value`` CSV."""
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["value"]:
        raise ConfigError(f"{path} is not a value CSV")
    return np.array([float(r[0]) for r in rows[1:]])


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, (np.ndarray, tuple)):
        return list(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ----------------------------------------------------------------------------
# config handling


def _get(section: dict, key: str, kind, default=None, required=False):
    if key not in section:
        if required:
            raise ConfigError(f"missing config field {key!r}")
        return default
    value = section[key]
    try:
        if kind is int:
            if isinstance(value, bool) or int(value) != value:
                raise ValueError
            return int(value)
        if kind is float:
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        if kind is list:
            if not isinstance(value, list):
                raise ValueError
            return value
        return kind(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config field {key!r} has the wrong type: {value!r}") from exc


def _int_grid(section: dict, key: str) -> list:
    """A list of ints, or a table ``{min_exp, max_exp}`` meaning powers of 2."""
    raw = section.get(key)
    if isinstance(raw, dict):
        lo, hi = _get(raw, "min_exp", int, required=True), _get(raw, "max_exp", int, required=True)
        return [2**k for k in range(lo, hi + 1)]
    grid = _get(section, key, list, required=True)
    if not all(isinstance(v, int) and not isinstance(v, bool) for v in grid):
        raise ConfigError(f"{key!r} must list integers")
    return grid


def _load_one_model(spec, base: Path) -> ChainModel:
    if isinstance(spec, str):
        return load_model(base / spec)
    if isinstance(spec, dict):
        if "file" in spec:
            return load_model(base / spec["file"])
        return model_from_dict(spec)
    raise ConfigError("model must be a file name or an inline table")


def _model_specs(command: str, cfg: dict) -> list:
    if command == "stable-sample":
        return []
    if command == "verify":
        listed = cfg.get("verify", {}).get("models")
        if listed is not None:
            if not isinstance(listed, list) or not listed:
                raise ConfigError("verify.models must be a non-empty list")
            return listed
    if "model" not in cfg:
        raise ConfigError("config has no [model] table")
    return [cfg["model"]]


def _check_seed(seed) -> int:
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    return seed


# ----------------------------------------------------------------------------
# commands


def cmd_stable_sample(ctx: RunContext) -> dict:
    s = ctx.section
    params = StableParams(
        _get(s, "alpha", float, required=True), _get(s, "beta", float, 0.0), _get(s, "scale", float, 1.0)
    )
    count = _get(s, "count", int, required=True)
    if count < 0:
        raise ConfigError("count must be >= 0")
    values = sample_standard_stable(params, _mc.substream(ctx.seed, 4), size=count)
    write_csv(ctx.run_dir / "samples.csv", ["value"], ((v,) for v in values))
    return {"samples.csv": count}


def _resolve_ell(ctx: RunContext, model: ChainModel) -> float:
    ell = _get(ctx.section, "ell", float)
    if ell is not None:
        if not ell > 0:
            raise ConfigError("ell must be positive")
        return ell
    n_cal = _get(ctx.section, "n_cal", int, 1024)
    cal_paths = _get(ctx.section, "cal_paths", int, 20_000)
    return calibrate_scale(model, n_cal, cal_paths, ctx.seed, ctx.workers).ell


def cmd_survival(ctx: RunContext) -> dict:
    s = ctx.section
    model = ctx.models[0]
    cfg = ExitConfig(
        j0=_get(s, "j0", int, 0),
        y=_get(s, "y", float, 1.0),
        n_grid=_int_grid(s, "n_grid"),
        paths=_get(s, "paths", int, required=True),
        seed=ctx.seed,
    )
    if not 0 <= cfg.j0 < model.states:
        raise ConfigError(f"j0={cfg.j0} is not a hidden state")
    table = estimate_survival(model, cfg, ctx.workers)
    write_csv(ctx.run_dir / "survival.csv", ["n", "p_hat", "stderr", "survivors"], table.rows())
    fit = fit_exponent(table, _get(s, "n_min", int, 1))
    rho = model_rho(model)
    write_json(
        ctx.run_dir / "fit.json",
        {"slope": fit.slope, "stderr": fit.stderr, "intercept": fit.intercept, "rows_used": fit.rows_used,
         "rho": rho, "expected_slope": -(1.0 - rho), "skew_beta": model.skew_beta, "alpha": model.alpha},
    )
    return {"survival.csv": len(table.n), "fit.json": 1}


def cmd_harmonic(ctx: RunContext) -> dict:
    s = ctx.section
    model = ctx.models[0]
    growth_grid = [float(v) for v in _get(s, "growth_grid", list, required=True)]
    if len(growth_grid) < 5:
        raise ConfigError(f"insufficient grid: growth_grid needs >= 5 levels, got {len(growth_grid)}")
    j0 = _get(s, "j0", int, 0)
    if not 0 <= j0 < model.states:
        raise ConfigError(f"j0={j0} is not a hidden state")
    tgrid = s.get("table_grid", {})
    table_levels = geometric_grid(
        _get(tgrid, "y_min", float, 1.0 / 16), _get(tgrid, "y_max", float, 32.0), _get(tgrid, "per_octave", int, 4)
    )
    check_levels = [float(v) for v in _get(s, "check_levels", list, [1.0, 2.0, 4.0])]
    ell = _resolve_ell(ctx, model)

    growth = harmonic_growth_fit(
        model, j0, growth_grid, _get(s, "n", int, required=True), _get(s, "paths", int, required=True),
        ctx.seed, ell=ell, p_max=_get(s, "p_max", float, 0.5), workers=ctx.workers,
    )
    table = harmonic_table(
        model, table_levels, _get(s, "table_n", int, 1024), _get(s, "table_paths", int, 200_000),
        ctx.seed + 1, ell=ell, workers=ctx.workers,
    )
    for y in check_levels:
        table.index(y)
    samples = _get(s, "samples", int, 1_000_000)
    reports = [
        check_harmonicity(model, table, j, y, samples, ctx.seed + 2)
        for j in range(model.states)
        for y in check_levels
    ]

    v = table.v_hat
    se = table.norm * binomial_stderr(table.p_n, table.paths)
    grid_rows = [
        (j, y, v[j, i], se[j, i], v[j, i] - 1.96 * se[j, i], v[j, i] + 1.96 * se[j, i])
        for j in range(model.states)
        for i, y in enumerate(table.y_grid)
    ]
    write_csv(ctx.run_dir / "harmonic_grid.csv", ["j", "y", "v_hat", "stderr", "ci_lo", "ci_hi"], grid_rows)
    write_csv(
        ctx.run_dir / "harmonicity.csv",
        ["j", "y", "lhs", "rhs", "residual", "relative_residual", "combined_stderr", "ci_lo", "ci_hi", "z", "passed"],
        (
            (r.j0, r.y, r.lhs, r.rhs, r.residual, r.relative_residual, r.combined_stderr,
             r.residual - 3 * r.combined_stderr, r.residual + 3 * r.combined_stderr, r.z, r.passes(3.0))
            for r in reports
        ),
    )
    expected = model.alpha * (1.0 - model_rho(model))
    write_json(
        ctx.run_dir / "growth.json",
        {"slope": growth.slope, "slope_stderr": growth.slope_stderr, "ci": growth.ci, "h_hat": growth.h_hat,
         "expected_slope": expected, "j0": j0, "y": growth.y, "v_hat": growth.v_hat, "used": growth.used,
         "ell": ell, "n": _get(s, "n", int)},
    )
    return {"harmonic_grid.csv": len(grid_rows), "harmonicity.csv": len(reports), "growth.json": 1}


def cmd_meander(ctx: RunContext) -> dict:
    s = ctx.section
    model = ctx.models[0]
    count = _get(s, "count", int, required=True)
    floor = _get(s, "floor", float, 1e-6)
    j0 = _get(s, "j0", int, 0)
    if not 0 <= j0 < model.states:
        raise ConfigError(f"j0={j0} is not a hidden state")
    ell = _resolve_ell(ctx, model)
    walk = conditioned_endpoint_samples(
        model, j0, _get(s, "y", float, 1.0), _get(s, "n", int, required=True), count, ctx.seed,
        ell=ell, floor=floor, workers=ctx.workers,
    )
    meander = sample_meander_endpoint(
        StableParams(model.alpha, model.skew_beta), _get(s, "grid_steps", int, 1024),
        _get(s, "meander_count", int, count), ctx.seed + 1, floor=floor, workers=ctx.workers,
    )
    ks = ks_two_sample(walk.values, meander.values)
    threshold = _get(s, "max_statistic", float, 0.05)
    write_csv(ctx.run_dir / "walk_endpoints.csv", ["value"], ((v,) for v in walk.values))
    write_csv(ctx.run_dir / "meander_endpoints.csv", ["value"], ((v,) for v in meander.values))
    write_json(
        ctx.run_dir / "ks.json",
        {"statistic": ks.statistic, "pvalue": ks.pvalue, "n_walk": ks.n_a, "n_meander": ks.n_b,
         "max_statistic": threshold, "passed": bool(ks.statistic < threshold), "ell": ell,
         "walk_acceptance_rate": walk.acceptance_rate, "walk_simulated": walk.simulated,
         "meander_acceptance_rate": meander.acceptance_rate, "meander_simulated": meander.simulated},
    )
    return {"walk_endpoints.csv": walk.values.size, "meander_endpoints.csv": meander.values.size, "ks.json": 1}


@dataclass
class Check:
    name: str
    tolerance: float
    observed: float
    passed: bool


def _sampler_checks(seed: int, draws: int) -> list:
    checks = []
    rng = _mc.substream(seed, 5)
    for beta in (-1.0, 0.0, 1.0):
        params = StableParams(1.5, beta)
        frac = float(np.mean(sample_standard_stable(params, rng, size=draws) > 0))
        se = float(binomial_stderr(params.rho, draws))
        checks.append(Check(f"sampler:positivity[beta={beta:g}]", 3 * se, abs(frac - params.rho),
                            abs(frac - params.rho) <= 3 * se))
    a = sample_standard_stable(StableParams(1.5, 0.5), rng, size=draws)
    b = -sample_standard_stable(StableParams(1.5, -0.5), rng, size=draws)
    ks = ks_two_sample(a, b)
    checks.append(Check("sampler:reflection_ks_pvalue", 0.01, ks.pvalue, ks.pvalue > 0.01))
    return checks


def _model_checks(label: str, raw, base: Path, seed: int, s: dict) -> list:
    try:
        data = json.loads((base / raw).read_text(encoding="utf-8")) if isinstance(raw, str) else raw
        if isinstance(data, dict) and "file" in data:
            data = json.loads((base / data["file"]).read_text(encoding="utf-8"))
        p = np.asarray(data["transition"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{label}: malformed model description: {exc}") from exc
    if p.ndim != 2 or p.shape[0] != p.shape[1] or p.size == 0:
        raise ConfigError(f"{label}: transition must be a square matrix")
    deviation = float(max(np.max(np.abs(p.sum(axis=1) - 1.0)), np.max(-p, initial=0.0)))
    stoch = Check(f"{label}:stochastic_matrix", 1e-12, deviation, deviation <= 1e-12)
    if not stoch.passed:
        return [stoch]
    try:
        check_stochastic(p)
        model = model_from_dict(data)
    except ModelError as exc:
        log.warning("%s: %s", label, exc)
        return [stoch, Check(f"{label}:model_valid", 0.0, math.nan, False)]
    checks = [stoch, Check(f"{label}:spectral_gap", 0.0, model.gap, model.gap > 0)]
    station = float(np.max(np.abs(model.pi @ model.transition - model.pi)))
    checks.append(Check(f"{label}:stationary_distribution", 1e-12, station, station <= 1e-12))
    dense = solve_poisson(model, "dense")
    neumann = solve_poisson(model, "neumann")
    checks.append(Check(f"{label}:poisson_residual_dense", 1e-10, dense.residual_inf, dense.residual_inf < 1e-10))
    checks.append(
        Check(f"{label}:poisson_residual_neumann", 1e-10, neumann.residual_inf, neumann.residual_inf < 1e-10)
    )
    agree = float(np.max(np.abs(dense.theta_state - neumann.theta_state)))
    checks.append(Check(f"{label}:poisson_methods_agree", 1e-8, agree, agree < 1e-8))

    paths, steps = _get(s, "paths", int, 200), _get(s, "steps", int, 2000)
    states, inc = simulate_walks(model, 0, steps, paths, seed)
    err = decomposition_error(dense, states, inc)
    checks.append(Check(f"{label}:decomposition_identity", 1e-9, err, err < 1e-9))
    grid = [steps // 8, steps // 4, steps // 2, steps]
    rem = remainder_sup_check(dense, model, grid, paths, seed)
    excess = float(np.max(rem.statistic - rem.bound))
    checks.append(Check(f"{label}:remainder_bound", 1e-12, excess, excess <= 1e-12))
    sw = sandwich_counts(model, dense, 0, _get(s, "y", float, 1.0), grid, paths, seed)
    checks.append(Check(f"{label}:sandwich_violations", 0.0, float(sw.violations), sw.violations == 0))
    return checks


def cmd_verify(ctx: RunContext) -> dict:
    s = ctx.section
    checks = _sampler_checks(ctx.seed, _get(s, "sampler_draws", int, 100_000))
    for i, raw in enumerate(ctx.models):
        label = raw if isinstance(raw, str) else raw.get("file", f"model{i}") if isinstance(raw, dict) else f"model{i}"
        checks.extend(_model_checks(str(label), raw, ctx.base_dir, ctx.seed + i, s))
    write_csv(
        ctx.run_dir / "report.csv",
        ["name", "tolerance", "observed", "passed"],
        ((c.name, c.tolerance, c.observed, c.passed) for c in checks),
    )
    # json cannot carry NaN portably
    write_json(
        ctx.run_dir / "report.json",
        {"checks": [{**asdict(c), "observed": None if math.isnan(c.observed) else c.observed} for c in checks],
         "passed": all(c.passed for c in checks)},
    )
    failed = [c.name for c in checks if not c.passed]
    for c in checks:
        log.info("%-50s %s observed=%.3g tolerance=%.3g", c.name, "PASS" if c.passed else "FAIL", c.observed, c.tolerance)
    outputs = {"report.csv": len(checks), "report.json": 1}
    if failed:
        raise _VerifyFailed(f"failed checks: {', '.join(failed)}", outputs)
    return outputs


class _VerifyFailed(StatisticalAbort):
    def __init__(self, message, outputs):
        super().__init__(message)
        self.outputs = outputs


HANDLERS = {
    "stable-sample": cmd_stable_sample,
    "survival": cmd_survival,
    "harmonic": cmd_harmonic,
    "meander": cmd_meander,
    "verify": cmd_verify,
}


# ----------------------------------------------------------------------------
# driver


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stablewalk", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"stablewalk {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path, help="TOML run config")
        p.add_argument("--seed", type=int, help="override the config seed (u64)")
        p.add_argument("--workers", type=int, help=f"worker processes (default: config, then ${_mc.WORKERS_ENV})")
        p.add_argument("--out", type=Path, default=Path("runs"), help="parent directory for run outputs")
        p.add_argument("--force", action="store_true", help="rerun even if a successful run exists")
        p.add_argument("-q", "--quiet", action="store_true")
    return parser


def _status_of(exc: BaseException) -> tuple:
    if isinstance(exc, StatisticalAbort):
        return "statistical_abort", EXIT_ABORT
    if isinstance(exc, (ConfigError, tomllib.TOMLDecodeError)):
        return "config_error", EXIT_CONFIG
    if isinstance(exc, OSError):
        return "io_error", EXIT_IO
    traceback.print_exception(type(exc), exc, exc.__traceback__)
    return "internal_error", 1


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    command = args.command
    t0 = time.perf_counter()
    manifest = RunManifest(
        command=command, config_digest=None, model_digest=None, seed=None, version=__version__,
        started=datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )
    run_dir = None
    try:
        raw = args.config.read_bytes()
        manifest.config_digest = _sha256(raw)
        run_dir = args.out / f"{command}-{_sha256(f'{command}:{args.config.resolve()}'.encode())[:12]}"
        cfg = tomllib.loads(raw.decode("utf-8"))
        if cfg.get("schema", CONFIG_SCHEMA) != CONFIG_SCHEMA:
            raise ConfigError(f"unsupported config schema {cfg.get('schema')!r}")
        seed = _check_seed(args.seed if args.seed is not None else cfg.get("seed", 0))
        manifest.seed = seed
        workers = args.workers if args.workers is not None else cfg.get("workers", _mc.default_workers())
        if isinstance(workers, bool) or not isinstance(workers, int) or workers < 1:
            raise ConfigError("workers must be a positive integer")
        base = args.config.resolve().parent
        specs = _model_specs(command, cfg)
        if command == "verify":
            # digest the raw descriptions: a broken model is a finding here, not an error
            models = specs
            manifest.model_digest = _sha256(b"".join(
                (base / s).read_bytes() if isinstance(s, str) else json.dumps(s, sort_keys=True).encode()
                for s in specs
            ))
        else:
            models = [_load_one_model(s, base) for s in specs]
            manifest.model_digest = models[0].digest() if models else None
        key = json.dumps(
            [command, manifest.config_digest, manifest.model_digest, seed, __version__], sort_keys=True
        ).encode()
        run_dir = args.out / f"{command}-{_sha256(key)[:12]}"
        previous = run_dir / "manifest.json"
        if previous.exists() and not args.force:
            try:
                status = json.loads(previous.read_text(encoding="utf-8")).get("status")
            except (OSError, ValueError):
                status = None
            if status == "ok":
                print(run_dir)
                log.info("up to date; use --force to rerun")
                return EXIT_OK
        run_dir.mkdir(parents=True, exist_ok=True)
        for stale in run_dir.iterdir():
            if stale.is_file():
                stale.unlink()
        ctx = RunContext(command, cfg.get(command.replace("-", "_"), {}), models, seed, workers, run_dir, base)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            outputs = HANDLERS[command](ctx)
        for w in caught:
            log.warning("warning: %s", w.message)
        manifest.outputs = {name: _sha256((run_dir / name).read_bytes()) for name in outputs}
        manifest.status, manifest.exit_code = "ok", EXIT_OK
    except Exception as exc:  # noqa: BLE001
        manifest.status, manifest.exit_code = _status_of(exc)
        manifest.message = str(exc)
        if run_dir is not None and isinstance(exc, _VerifyFailed):
            manifest.outputs = {name: _sha256((run_dir / name).read_bytes()) for name in exc.outputs}
        print(f"stablewalk {command}: {manifest.status}: {exc}", file=sys.stderr)
    manifest.wall_clock = round(time.perf_counter() - t0, 3)
    if run_dir is None:
        run_dir = args.out / f"{command}-unreadable-config"
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        write_json(run_dir / "manifest.json", asdict(manifest))
    except OSError as exc:
        print(f"stablewalk {command}: could not write manifest: {exc}", file=sys.stderr)
        return manifest.exit_code if manifest.exit_code != EXIT_OK else EXIT_IO
    if manifest.status == "ok":
        print(run_dir)
    return manifest.exit_code


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
