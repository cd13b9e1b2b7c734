import json

from click.testing import CliRunner

from stalepipe.cli import main

CFG = """
model.layers = dense(12,16), relu, dense(16,12), relu, dense(12,4)
model.boundaries = 2,4
pipeline.p = 1,1,0
pipeline.m = 4,2,0
optimizer.rule = sum
optimizer.beta = 0.9
optimizer.lr = 0.05
data.source = teacher
data.teacher_dims = 12,8,4
data.n_train = 128
data.n_test = 32
data.batch_size = 16
train.epochs = 1
train.seed = 3
"""

BAD_CFG = """
pipeline.p = 1,1,0
pipeline.m = 2,2,0
"""

SIM_CFG = """
simulate.schedule = sync_bp
simulate.k = 4
simulate.steps = 40
"""


def write(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_validate_prints_depths(tmp_path):
    result = CliRunner().invoke(main, ["validate", "--config", write(tmp_path, CFG)])
    assert result.exit_code == 0, result.output
    assert "q = 0,1,1" in result.output
    assert "staleness = 4,2,0" in result.output
    assert "max_staleness = 4" in result.output


def test_validate_bad_config_single_error_line(tmp_path):
    result = CliRunner().invoke(main, ["validate", "--config", write(tmp_path, BAD_CFG)])
    assert result.exit_code == 1
    err_lines = [l for l in result.output.splitlines() if l.startswith("error:")]
    assert len(err_lines) == 1
    assert "q[1]" in err_lines[0]


def test_train_writes_artifacts(tmp_path):
    out = tmp_path / "out"
    result = CliRunner().invoke(
        main, ["train", "--config", write(tmp_path, CFG), "--out", str(out)]
    )
    assert result.exit_code == 0, result.output
    assert "final_train_loss" in result.output
    assert (out / "train_log.jsonl").exists()
    assert (out / "summary.csv").exists()
    assert (out / "resolved.cfg").exists()


def test_train_seed_and_backend_overrides(tmp_path):
    out = tmp_path / "out"
    result = CliRunner().invoke(main, [
        "train", "--config", write(tmp_path, CFG), "--out", str(out),
        "--seed", "99", "--backend", "parallel",
    ])
    assert result.exit_code == 0, result.output
    resolved = (out / "resolved.cfg").read_text()
    assert "train.seed = 99" in resolved
    assert "train.backend = parallel" in resolved


def test_train_backends_agree_bitwise(tmp_path):
    runner = CliRunner()
    sums = {}
    for backend in ("serial", "parallel"):
        out = tmp_path / backend
        result = runner.invoke(main, [
            "train", "--config", write(tmp_path, CFG), "--out", str(out),
            "--backend", backend,
        ])
        assert result.exit_code == 0, result.output
        line = next(l for l in result.output.splitlines() if l.startswith("checksum"))
        sums[backend] = line
    assert sums["serial"] == sums["parallel"]


def test_simulate_prints_interval(tmp_path):
    out = tmp_path / "sim"
    result = CliRunner().invoke(
        main, ["simulate", "--config", write(tmp_path, SIM_CFG), "--out", str(out)]
    )
    assert result.exit_code == 0, result.output
    assert "steady_interval = 8" in result.output
    assert (out / "trace.csv").exists()


def test_gradcheck_passes(tmp_path):
    cfg = write(tmp_path, "gradcheck.cases = 3\n")
    result = CliRunner().invoke(main, ["gradcheck", "--config", cfg])
    assert result.exit_code == 0, result.output
    assert "passed = true" in result.output


def test_missing_config_file():
    result = CliRunner().invoke(main, ["validate", "--config", "/nonexistent/x.cfg"])
    assert result.exit_code != 0
