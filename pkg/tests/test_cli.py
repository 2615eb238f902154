import csv
import io
import json

import pytest

from mpctune import cli
from mpctune.cli import BENCHMARK_COLUMNS, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_OK, EXIT_RUNTIME, main

SMALL = {"tuner": {"budget": 4, "n_initial": 3, "n_validation": 5}, "seeds": [0, 1]}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def run(argv, capsys):
    code = main(argv)
    return code, capsys.readouterr()


def test_simulate_default_theta(tmp_path, capsys):
    code, out = run(["simulate", "--out", str(tmp_path)], capsys)
    res = json.loads(out.out)
    assert code == EXIT_OK
    assert res["params"] == [15, 15, -3.0, -1.0]
    assert all(isinstance(res[k], float) for k in ("ite", "overshoot", "step_time"))


def test_simulate_out_of_bounds_theta(tmp_path, capsys):
    code, out = run(["simulate", "--theta", "40", "40", "-3", "-1", "--out", str(tmp_path)], capsys)
    assert code == EXIT_CONFIG
    assert "theta" in out.err


def test_simulate_trace_rows(tmp_path, capsys):
    code, _ = run(["simulate", "--trace", "--out", str(tmp_path)], capsys)
    assert code == EXIT_OK
    rows = (tmp_path / "trace.csv").read_text().splitlines()
    assert len(rows) == 1 + 1501
    assert (tmp_path / "config.json").is_file()


def test_bad_config_reports_path(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{"tuner": {"budget": 2}}')
    code, out = run(["validate", "--config", str(path)], capsys)
    assert code == EXIT_CONFIG and "tuner" in out.err


def test_validate_verdicts(capsys):
    code, out = run(["validate"], capsys)
    verdict = json.loads(out.out)["validation"]["feasible"]
    assert code == (EXIT_OK if verdict else EXIT_INFEASIBLE)
    code, out = run(["validate", "--theta", "28", "28", "-1", "-1"], capsys)
    assert code == EXIT_INFEASIBLE
    assert json.loads(out.out)["validation"]["time_ok"] is False


def test_benchmark_smoke(tmp_path, small_config, capsys):
    code, out = run(["benchmark", "--config", small_config, "--out", str(tmp_path)], capsys)
    assert code == EXIT_OK
    rows = list(csv.DictReader(io.StringIO((tmp_path / "benchmark.csv").read_text())))
    assert [r["algorithm"] for r in rows] == ["I", "II", "III", "IV"]
    assert tuple(rows[0].keys()) == BENCHMARK_COLUMNS
    runs = list(csv.DictReader(io.StringIO((tmp_path / "runs.csv").read_text())))
    assert len(runs) == 8
    assert (tmp_path / "IV_seed1" / "summary.json").is_file()


@pytest.fixture(scope="module")
def tuned(tmp_path_factory):
    root = tmp_path_factory.mktemp("tune")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"tuner": {"budget": 8, "n_initial": 4, "n_validation": 6}}))
    a, b = root / "a", root / "b"
    assert main(["tune", "--config", str(cfg), "--seed", "3", "--out", str(a)]) == EXIT_OK
    assert main(["tune", "--config", str(cfg), "--seed", "3", "--out", str(b)]) == EXIT_OK
    return cfg, a, b


def test_tune_is_byte_identical(tuned):
    _, a, b = tuned
    assert (a / "history.jsonl").read_bytes() == (b / "history.jsonl").read_bytes()
    ca, cb = (json.loads((d / "config.json").read_text()) for d in (a, b))
    assert ca.pop("out") != cb.pop("out") and ca == cb


def test_history_incumbent_column_is_monotone(tuned):
    _, a, _ = tuned
    values = [json.loads(line)["best_validation"] for line in (a / "history.jsonl").read_text().splitlines()]
    seen = [v for v in values if v is not None]
    assert all(x >= y for x, y in zip(seen, seen[1:]))
    # once set it stays set
    first = next((i for i, v in enumerate(values) if v is not None), len(values))
    assert all(v is not None for v in values[first:])


def test_summary_revalidates_bit_exactly(tuned, capsys):
    cfg, a, _ = tuned
    summary = json.loads((a / "summary.json").read_text())
    theta = [str(v) for v in summary["best"]]
    code, out = run(["validate", "--config", str(a / "config.json"), "--theta", *theta], capsys)
    res = json.loads(out.out)["validation"]
    assert res == summary["validation"]
    assert code == (EXIT_OK if res["feasible"] else EXIT_INFEASIBLE)


def test_grid_from_tune_artifacts(tuned, tmp_path, capsys):
    _, a, _ = tuned
    code, _ = run(["grid", "--run", str(a), "--out", str(tmp_path)], capsys)
    assert code == EXIT_OK
    rows = list(csv.DictReader(io.StringIO((tmp_path / "grid.csv").read_text())))
    assert len(rows) == 900
    assert {"objective_mean", "p_feas", "p_out", "p_fail"} <= set(rows[0])
    assert (tmp_path / "step_time_grid.csv").is_file()


def test_grid_missing_artifacts_names_path(tmp_path, capsys):
    code, out = run(["grid", "--run", str(tmp_path / "empty"), "--out", str(tmp_path)], capsys)
    assert code == EXIT_RUNTIME
    assert str(tmp_path / "empty" / "config.json") in out.err


def test_rows_to_csv_keeps_full_precision():
    text = cli.rows_to_csv([{"a": 0.1 + 0.2}])
    assert text.splitlines()[1] == repr(0.1 + 0.2)
