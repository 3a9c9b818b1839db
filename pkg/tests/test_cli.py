import json
import shutil
from pathlib import Path

import pytest

from drcl.cli import main

DEMO = Path(__file__).resolve().parents[1] / "configs" / "demo.yaml"
OUTPUTS = ("matrix.csv", "metrics.csv", "trace.csv", "sparsity_grid.csv", "summary.json")


@pytest.fixture(scope="module")
def demo_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("demo")
    assert main(["run", "-c", str(DEMO), "--set", f"output_dir={out}"]) == 0
    return out


def test_demo_run_writes_outputs(demo_run):
    for name in OUTPUTS:
        assert (demo_run / name).stat().st_size > 0
    assert (demo_run / "ckpt" / "seed_1" / "task_003.ckpt").is_file()
    assert (demo_run / "runs" / "seed_0.json").is_file()


def test_missing_config_exit_1(tmp_path, capsys):
    assert main(["run", "-c", str(tmp_path / "nope.yaml")]) == 1
    assert "nope.yaml" in capsys.readouterr().err


def test_unknown_override_exit_1(capsys):
    assert main(["validate", "-c", str(DEMO), "--set", "solver.lamda=3"]) == 1
    assert "solver.lamda" in capsys.readouterr().err


def test_usage_error_exit_1():
    with pytest.raises(SystemExit) as err:
        main(["run"])
    assert err.value.code == 1


def test_validate_ok():
    assert main(["validate", "-c", str(DEMO)]) == 0


def test_seeds_flag_overrides_config(tmp_path):
    assert main(["run", "-c", str(DEMO), "--set", f"output_dir={tmp_path}", "--seeds", "3"]) == 0
    assert json.loads((tmp_path / "summary.json").read_text())["seeds"] == [3]


def test_zero_lambda_override_reproduces_sgd(tmp_path):
    a, b = tmp_path / "drcl", tmp_path / "sgd"
    assert main(["run", "-c", str(DEMO), "--set", f"output_dir={a}", "--set", "solver.lambda=0"]) == 0
    assert main(["run", "-c", str(DEMO), "--set", f"output_dir={b}", "--set", "method=sgd"]) == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "matrix.csv").read_bytes() == (b / "matrix.csv").read_bytes()


def test_compare_self_has_zero_deltas(demo_run, capsys):
    assert main(["compare", str(demo_run), str(demo_run)]) == 0
    out = capsys.readouterr().out
    rows = [line for line in out.splitlines()[1:] if line.strip()]
    assert len(rows) == 4
    assert all(line.split()[-1] == "+0.0000" for line in rows)


def test_compare_reports_difference(demo_run, tmp_path, capsys):
    other = tmp_path / "other"
    shutil.copytree(demo_run, other)
    s = json.loads((other / "summary.json").read_text())
    s["aggregate"]["metrics"]["avg_accuracy"]["mean"] -= 0.25
    (other / "summary.json").write_text(json.dumps(s))
    assert main(["compare", str(demo_run), str(other)]) == 0
    line = next(l for l in capsys.readouterr().out.splitlines() if l.startswith("avg_accuracy"))
    assert line.split()[-1] == "-0.2500"


def test_compare_incompatible_tasks_exit_1(demo_run, tmp_path):
    other = tmp_path / "other"
    shutil.copytree(demo_run, other)
    s = json.loads((other / "summary.json").read_text())
    s["tasks"]["num_tasks"] = 7
    (other / "summary.json").write_text(json.dumps(s))
    assert main(["compare", str(demo_run), str(other)]) == 1


def test_compare_missing_dir_exit_1(tmp_path):
    assert main(["compare", str(tmp_path), str(tmp_path)]) == 1


def test_metrics_long_format(demo_run, capsys):
    assert main(["metrics", str(demo_run / "matrix.csv")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3 and lines[1].split()[:2] == ["0", "4"]


def test_metrics_square_format(tmp_path, capsys):
    p = tmp_path / "m.csv"
    p.write_text("0.9,\n0.8,0.7\n")
    assert main(["metrics", str(p)]) == 0
    row = capsys.readouterr().out.strip().splitlines()[1].split()
    assert row[2:] == ["0.7500", "0.1000", "0.8250", "-0.1000"]


def test_prox_demo(capsys):
    assert main(["prox-demo", "--tau", "0.5", "--x-old", "0", "1.2", "0.3", "-0.8"]) == 0
    assert capsys.readouterr().out.splitlines() == ["1.2 -> 0.7", "0.3 -> 0", "-0.8 -> -0.3"]


def test_partial_failure_exit_2(tmp_path, monkeypatch):
    from drcl import runner
    from drcl.errors import NumericalError

    real = runner.run_seed

    def failing(cfg, seed, out_dir=None, dataset=None):
        rec = real(cfg, seed, out_dir, dataset)
        if seed == 1:
            rec.status, rec.error = "failed", repr(NumericalError("boom"))
        return rec

    monkeypatch.setattr(runner, "run_seed", failing)
    assert main(["run", "-c", str(DEMO), "--set", f"output_dir={tmp_path}"]) == 2
    assert json.loads((tmp_path / "summary.json").read_text())["failed_seeds"] == [1]


def test_internal_error_exit_3(tmp_path, monkeypatch):
    from drcl import cli

    def boom(cfg):
        raise RuntimeError("unexpected")

    monkeypatch.setattr(cli, "run_experiment", boom)
    assert main(["run", "-c", str(DEMO), "--set", f"output_dir={tmp_path}"]) == 3
