from __future__ import annotations

import json
import math
import os
import re

import numpy as np
import pytest

from fairlend import cli
from fairlend.analysis import decompose
from fairlend.config import load_config
from fairlend.env import ConfigError
from fairlend.harness import (
    COLUMNS,
    EmissionError,
    ExperimentSpec,
    MetricCsvWriter,
    MetricRow,
    Series,
    emit_csv,
    emit_svg,
    read_csv,
    report_csv,
    run_experiment,
)
from fairlend.policy import PolicyParams


def make_row(i, **kw):
    values = dict(
        iteration=i, seed=0, algo="ppo", utility=1 / 3, c_pi=0.1 * i, dpe=-2.5e-17, ipe=1e300,
        spe=0.0, lambda_metric=0.2, wasserstein_gap=1.0, loan_rate_plus=0.5,
        loan_rate_minus=0.25, adjusted_c_pi=np.float64(0.7),
    )
    values.update(kw)
    return MetricRow(**values)


def test_column_order_is_fixed():
    assert COLUMNS == (
        "iteration", "seed", "algo", "utility", "c_pi", "dpe", "ipe", "spe", "lambda_metric",
        "wasserstein_gap", "loan_rate_plus", "loan_rate_minus", "adjusted_c_pi",
    )


def test_empty_history_is_header_only(tmp_path):
    path = emit_csv([], tmp_path / "empty.csv")
    assert path.read_bytes() == (",".join(COLUMNS) + "\n").encode()


def test_row_count_and_exact_round_trip(tmp_path):
    rows = [make_row(i, utility=float(np.random.default_rng(i).normal())) for i in range(1, 301)]
    path = emit_csv(rows, tmp_path / "rows.csv")
    data = path.read_bytes()
    assert b"\r" not in data
    assert data.count(b"\n") == 301
    back = read_csv(path)
    assert back == [MetricRow(r.iteration, r.seed, r.algo, *(float(getattr(r, c)) for c in COLUMNS[3:])) for r in rows]


def test_nan_is_refused_with_iteration(tmp_path):
    rows = [make_row(1), make_row(2, lambda_metric=math.nan)]
    with pytest.raises(EmissionError, match="lambda_metric.*iteration 2"):
        emit_csv(rows, tmp_path / "nan.csv")
    assert not (tmp_path / "nan.csv").exists()
    with MetricCsvWriter(tmp_path / "stream.csv") as out:
        out.write(make_row(1))
        with pytest.raises(EmissionError, match="iteration 3"):
            out.write(make_row(3, utility=math.inf))
    assert len(read_csv(tmp_path / "stream.csv")) == 1


def test_io_errors_surface(tmp_path):
    with pytest.raises(OSError):
        emit_csv([make_row(1)], tmp_path / "missing" / "x.csv")


def test_report_csv(tmp_path):
    env, _ = load_config("setting1")
    report = decompose(PolicyParams.zeros(7), env)
    lines = report_csv(report, tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].split(",")[0] == "c_pi" and len(lines) == 2
    assert float(lines[1].split(",")[0]) == report.c_pi


def test_svg_has_one_polyline_per_series(tmp_path):
    series = [Series("a", [1, 2, 3], [0.0, 1.0, 0.5]), Series("b <x>", [1, 2, 3], [2.0, 2.0, 2.0])]
    path = emit_svg(series, tmp_path / "c.svg", title="t", xlabel="iteration", ylabel="c_pi")
    text = path.read_text()
    assert text.count("<polyline") == 2
    assert 'version="1.1"' in text and ">iteration<" in text and ">c_pi<" in text
    assert "b &lt;x&gt;" in text
    with pytest.raises(EmissionError):
        emit_svg([Series("bad", [1], [math.nan])], tmp_path / "bad.svg")


# -- experiments --------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def env_train():
    env, train = load_config("setting1")
    return env, train.replace(iterations=4, episodes_per_iter=20)


def test_run_experiment_outputs(tmp_path, env_train):
    env, train = env_train
    spec = ExperimentSpec(env, train, seeds=[0, 1, 2], out_dir=tmp_path / "out", algos=("ppo", "ppo-c"))
    manifest = run_experiment(spec)
    assert len(manifest["runs"]) == 6 and len(manifest["averages"]) == 2
    assert len(manifest["charts"]) == len(COLUMNS) - 3
    for paths in manifest.values():
        for p in paths:
            assert os.path.exists(p)
    runs = {s: read_csv(tmp_path / "out" / "runs" / f"ppo-c_seed{s}.csv") for s in (0, 1, 2)}
    mean = read_csv(tmp_path / "out" / "ppo-c_mean.csv")
    assert len(mean) == 4
    for i, row in enumerate(mean):
        expected = np.mean([runs[s][i].c_pi for s in runs])
        assert abs(row.c_pi - expected) < 1e-12
    svg = (tmp_path / "out" / "charts" / "c_pi.svg").read_text()
    assert svg.count("<polyline") == 2 * 3 + 2
    listed = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert set(listed) == {"runs", "policies", "averages", "charts", "meta"}


def test_run_experiment_is_deterministic(tmp_path, env_train):
    env, train = env_train
    for name in ("a", "b"):
        run_experiment(ExperimentSpec(env, train, seeds=[3], out_dir=tmp_path / name, algos=("ppo-cb",)))
    for rel in ("runs/ppo-cb_seed3.csv", "ppo-cb_mean.csv"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_parallel_matches_serial(tmp_path, env_train):
    env, train = env_train
    run_experiment(ExperimentSpec(env, train, seeds=[0, 1], out_dir=tmp_path / "s", algos=("ppo",)))
    run_experiment(ExperimentSpec(env, train, seeds=[0, 1], out_dir=tmp_path / "p", algos=("ppo",), workers=2))
    assert (tmp_path / "s" / "ppo_mean.csv").read_bytes() == (tmp_path / "p" / "ppo_mean.csv").read_bytes()


def test_invalid_spec_fails_before_training(tmp_path, env_train):
    env, train = env_train
    with pytest.raises(ConfigError, match="seed"):
        run_experiment(ExperimentSpec(env, train, seeds=[], out_dir=tmp_path / "x"))
    with pytest.raises(ConfigError, match="algo"):
        run_experiment(ExperimentSpec(env, train, seeds=[0], out_dir=tmp_path / "x", algos=("a-ppo",)))
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(ConfigError, match="not writable"):
        run_experiment(ExperimentSpec(env, train, seeds=[0], out_dir=blocker / "sub"))
    assert not (tmp_path / "x" / "runs").exists()


def test_variants_label_runs(tmp_path, env_train):
    env, train = env_train
    spec = ExperimentSpec(env, train, seeds=[0], out_dir=tmp_path / "v", algos=("ppo-cb",),
                          variants={"bl0": {"beta_lambda": 0.0}, "bl2": {"beta_lambda": 2.0}})
    assert [label for label, _ in spec.runs()] == ["ppo-cb_bl0", "ppo-cb_bl2"]
    assert spec.runs()[1][1].beta_lambda == 2.0


# -- CLI --------------------------------------------------------------------------------------


def test_cli_train_and_decompose(tmp_path, capsys):
    out = tmp_path / "cli"
    code = cli.main(["train", "--preset", "setting1", "--out", str(out), "--seeds", "0-1",
                     "--algo", "ppo-c", "--iterations", "3", "--episodes", "10", "--beta-kl", "5"])
    assert code == 0
    assert sorted(p.name for p in (out / "runs").iterdir()) == ["ppo-c_seed0.csv", "ppo-c_seed1.csv"]
    capsys.readouterr()
    assert cli.main(["decompose", "--preset", "setting1", "--policy", str(out / "policies" / "ppo-c_seed0.txt")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["c_pi"] == pytest.approx(report["dpe"] + report["ipe"] + report["spe"], abs=1e-10)
    assert cli.main(["decompose", "--preset", "setting3", "--out", str(tmp_path / "r.csv")]) == 0
    assert (tmp_path / "r.csv").read_text().startswith("c_pi,")


def test_cli_sweep(tmp_path):
    out = tmp_path / "sweep"
    code = cli.main(["sweep", "--preset", "setting2", "--out", str(out), "--algo", "ppo-cb",
                     "--param", "beta-lambda", "--values", "0,2", "--iterations", "2", "--episodes", "10"])
    assert code == 0
    assert (out / "ppo-cb_beta_lambda0_mean.csv").exists()
    assert (out / "ppo-cb_beta_lambda2_mean.csv").exists()


def test_cli_reports_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"env": {"num_levels": 7, "groups": {}, "colour": 1}}))
    assert cli.main(["decompose", "--config", str(bad)]) == 2
    assert "colour" in capsys.readouterr().err
    assert cli.main(["train", "--preset", "setting1", "--out", str(tmp_path / "o"), "--epsilon", "-1"]) == 2
    assert "epsilon" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        cli.main(["train", "--preset", "setting1", "--out", str(tmp_path), "--seeds", "a,b"])
