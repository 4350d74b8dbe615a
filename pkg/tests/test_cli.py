import csv
import json
from pathlib import Path

import pytest

from stablewalk.cli import EXIT_ABORT, EXIT_CONFIG, EXIT_IO, EXIT_OK, read_value_csv, run

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
MODELS = CONFIGS / "models"


def write_config(tmp_path, body, name="run.toml"):
    path = tmp_path / name
    path.write_text('schema = "stablewalk/config-v1"\nseed = 3\n' + body, encoding="utf-8")
    return path


def run_dir(out: Path, command: str) -> Path:
    dirs = [d for d in out.iterdir() if d.name.startswith(command + "-")]
    assert len(dirs) == 1, dirs
    return dirs[0]


def manifest(out, command):
    return json.loads((run_dir(out, command) / "manifest.json").read_text())


def read_rows(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.reader(fh))


SAMPLE = """
[stable_sample]
alpha = {alpha}
beta = 0.5
count = {count}
"""

SURVIVAL = f"""
[model]
file = "{MODELS / 'markov.json'}"

[survival]
j0 = 1
y = 1.0
n_grid = [4, 16, 64, 256]
paths = 20000
"""


def test_stable_sample_deterministic(tmp_path):
    cfg = write_config(tmp_path, SAMPLE.format(alpha=1.5, count=500))
    assert run(["stable-sample", "--config", str(cfg), "--out", str(tmp_path / "a"), "-q"]) == EXIT_OK
    assert run(["stable-sample", "--config", str(cfg), "--out", str(tmp_path / "b"), "-q", "--workers", "4"]) == EXIT_OK
    a = (run_dir(tmp_path / "a", "stable-sample") / "samples.csv").read_bytes()
    b = (run_dir(tmp_path / "b", "stable-sample") / "samples.csv").read_bytes()
    assert a == b
    assert a.startswith(b"value\n") and b"\r" not in a
    assert read_value_csv(run_dir(tmp_path / "a", "stable-sample") / "samples.csv").size == 500
    m = manifest(tmp_path / "a", "stable-sample")
    assert m["status"] == "ok" and m["seed"] == 3 and "samples.csv" in m["outputs"]
    assert set(m) >= {"command", "config_digest", "model_digest", "seed", "version", "wall_clock", "outputs"}


def test_stable_sample_bad_alpha(tmp_path):
    cfg = write_config(tmp_path, SAMPLE.format(alpha=2.5, count=10))
    assert run(["stable-sample", "--config", str(cfg), "--out", str(tmp_path), "-q"]) == EXIT_CONFIG
    d = run_dir(tmp_path, "stable-sample")
    assert not (d / "samples.csv").exists()
    assert json.loads((d / "manifest.json").read_text())["status"] == "config_error"


def test_stable_sample_zero_count(tmp_path):
    cfg = write_config(tmp_path, SAMPLE.format(alpha=1.5, count=0))
    assert run(["stable-sample", "--config", str(cfg), "--out", str(tmp_path), "-q"]) == EXIT_OK
    d = run_dir(tmp_path, "stable-sample")
    assert (d / "samples.csv").read_text() == "value\n"
    assert (d / "manifest.json").exists()


def test_seed_override_changes_run(tmp_path):
    cfg = write_config(tmp_path, SAMPLE.format(alpha=1.5, count=20))
    run(["stable-sample", "--config", str(cfg), "--out", str(tmp_path), "-q"])
    run(["stable-sample", "--config", str(cfg), "--out", str(tmp_path), "-q", "--seed", "4"])
    dirs = sorted(d for d in tmp_path.iterdir() if d.name.startswith("stable-sample-"))
    assert len(dirs) == 2
    assert (dirs[0] / "samples.csv").read_bytes() != (dirs[1] / "samples.csv").read_bytes()


def test_rerun_is_noop_unless_forced(tmp_path):
    cfg = write_config(tmp_path, SAMPLE.format(alpha=1.5, count=20))
    args = ["stable-sample", "--config", str(cfg), "--out", str(tmp_path), "-q"]
    assert run(args) == EXIT_OK
    first = (run_dir(tmp_path, "stable-sample") / "manifest.json").read_bytes()
    assert run(args) == EXIT_OK
    assert (run_dir(tmp_path, "stable-sample") / "manifest.json").read_bytes() == first
    assert run(args + ["--force"]) == EXIT_OK
    assert json.loads((run_dir(tmp_path, "stable-sample") / "manifest.json").read_text())["status"] == "ok"


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("seed = [unterminated\n")
    assert run(["stable-sample", "--config", str(bad), "--out", str(tmp_path), "-q"]) == EXIT_CONFIG
    wrong = write_config(tmp_path, SAMPLE.format(alpha=1.5, count=10).replace('count = 10', 'count = "ten"'))
    assert run(["stable-sample", "--config", str(wrong), "--out", str(tmp_path), "-q"]) == EXIT_CONFIG
    schema = tmp_path / "schema.toml"
    schema.write_text('schema = "other/v9"\n')
    assert run(["stable-sample", "--config", str(schema), "--out", str(tmp_path), "-q"]) == EXIT_CONFIG
    cfg = write_config(tmp_path, SAMPLE.format(alpha=1.5, count=10), "ok.toml")
    assert run(["stable-sample", "--config", str(cfg), "--out", str(tmp_path), "-q", "--seed", "-1"]) == EXIT_CONFIG


def test_missing_files_are_io_errors(tmp_path):
    assert run(["survival", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path), "-q"]) == EXIT_IO
    cfg = write_config(tmp_path, SURVIVAL.replace(str(MODELS / "markov.json"), str(tmp_path / "missing.json")))
    assert run(["survival", "--config", str(cfg), "--out", str(tmp_path / "m"), "-q"]) == EXIT_IO
    assert manifest(tmp_path / "m", "survival")["status"] == "io_error"


def test_survival_worker_invariance(tmp_path):
    cfg = write_config(tmp_path, SURVIVAL)
    assert run(["survival", "--config", str(cfg), "--out", str(tmp_path / "w1"), "--workers", "1", "-q"]) == EXIT_OK
    assert run(["survival", "--config", str(cfg), "--out", str(tmp_path / "w8"), "--workers", "8", "-q"]) == EXIT_OK
    d1, d8 = run_dir(tmp_path / "w1", "survival"), run_dir(tmp_path / "w8", "survival")
    assert d1.name == d8.name
    for name in ("survival.csv", "fit.json"):
        assert (d1 / name).read_bytes() == (d8 / name).read_bytes()
    rows = read_rows(d1 / "survival.csv")
    assert rows[0] == ["n", "p_hat", "stderr", "survivors"]
    assert [int(r[0]) for r in rows[1:]] == [4, 16, 64, 256]


HARMONIC = f"""
[model]
file = "{MODELS / 'markov.json'}"

[harmonic]
ell = 0.3
growth_grid = {{grid}}
n = 256
paths = 5000
table_n = 128
table_paths = 5000
table_grid = {{{{ y_min = 0.0625, y_max = 16.0, per_octave = 2 }}}}
check_levels = [1.0, 2.0]
samples = 20000
"""


def test_harmonic_report_schema(tmp_path):
    cfg = write_config(tmp_path, HARMONIC.format(grid="[1.0, 2.0, 4.0, 8.0, 16.0]"))
    assert run(["harmonic", "--config", str(cfg), "--out", str(tmp_path), "-q"]) == EXIT_OK
    d = run_dir(tmp_path, "harmonic")
    rows = read_rows(d / "harmonicity.csv")
    assert {"ci_lo", "ci_hi", "combined_stderr"} <= set(rows[0])
    cells = {(r[0], r[1]) for r in rows[1:]}
    assert cells == {(j, y) for j in ("0", "1") for y in ("1.0", "2.0")}
    growth = json.loads((d / "growth.json").read_text())
    assert growth["expected_slope"] == pytest.approx(0.75)
    grid_rows = read_rows(d / "harmonic_grid.csv")
    assert grid_rows[0] == ["j", "y", "v_hat", "stderr", "ci_lo", "ci_hi"]


def test_harmonic_insufficient_grid(tmp_path):
    cfg = write_config(tmp_path, HARMONIC.format(grid="[1.0]"))
    assert run(["harmonic", "--config", str(cfg), "--out", str(tmp_path), "-q"]) == EXIT_CONFIG
    assert "insufficient grid" in manifest(tmp_path, "harmonic")["message"]


MEANDER = f"""
[model]
file = "{MODELS / 'symmetric.json'}"

[meander]
ell = 0.29
y = 1.0
n = {{n}}
count = 1000
meander_count = 1200
grid_steps = {{grid}}
floor = {{floor}}
"""


def test_meander_counts(tmp_path):
    cfg = write_config(tmp_path, MEANDER.format(n=64, grid=32, floor=1e-6))
    assert run(["meander", "--config", str(cfg), "--out", str(tmp_path), "-q"]) == EXIT_OK
    d = run_dir(tmp_path, "meander")
    assert read_value_csv(d / "walk_endpoints.csv").size == 1000
    assert read_value_csv(d / "meander_endpoints.csv").size == 1200
    ks = json.loads((d / "ks.json").read_text())
    assert ks["n_walk"] == 1000 and ks["n_meander"] == 1200


def test_meander_floor_abort(tmp_path):
    cfg = write_config(tmp_path, MEANDER.format(n=512, grid=32, floor=0.9))
    assert run(["meander", "--config", str(cfg), "--out", str(tmp_path), "-q"]) == EXIT_ABORT
    m = manifest(tmp_path, "meander")
    assert m["status"] == "statistical_abort"
    assert not (run_dir(tmp_path, "meander") / "walk_endpoints.csv").exists()


VERIFY = """
[verify]
models = {models}
paths = 50
steps = 500
sampler_draws = 20000
"""


def test_verify_bundled(tmp_path):
    models = [str(MODELS / f"{n}.json") for n in ("symmetric", "skewed", "markov")]
    cfg = write_config(tmp_path, VERIFY.format(models=json.dumps(models)))
    assert run(["verify", "--config", str(cfg), "--out", str(tmp_path), "-q"]) == EXIT_OK
    rows = read_rows(run_dir(tmp_path, "verify") / "report.csv")
    assert rows[0] == ["name", "tolerance", "observed", "passed"]
    assert all(r[3] == "1" for r in rows[1:])
    names = {r[0].split(":")[-1] for r in rows[1:]}
    assert {"stochastic_matrix", "poisson_residual_dense", "decomposition_identity", "sandwich_violations"} <= names


def test_verify_corrupted_row_sum(tmp_path):
    data = json.loads((MODELS / "markov.json").read_text())
    data["transition"][0] = [0.91, 0.1]
    (tmp_path / "broken.json").write_text(json.dumps(data))
    cfg = write_config(tmp_path, VERIFY.format(models='["broken.json"]'))
    assert run(["verify", "--config", str(cfg), "--out", str(tmp_path), "-q"]) == EXIT_ABORT
    report = json.loads((run_dir(tmp_path, "verify") / "report.json").read_text())
    failed = [c["name"] for c in report["checks"] if not c["passed"]]
    assert failed == ["broken.json:stochastic_matrix"]
    check = next(c for c in report["checks"] if c["name"] == failed[0])
    assert check["observed"] == pytest.approx(0.01)
    assert manifest(tmp_path, "verify")["status"] == "statistical_abort"
