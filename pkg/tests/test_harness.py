import csv
import json
import math
import subprocess
import sys

import pytest

from hadmc.cli import main
from hadmc.harness import (
    COMPARISON_COLUMNS,
    ConfigError,
    ReportError,
    build_report,
    frequency_variance,
    generate_set,
    latent_dim_sweep,
    load_config,
    parse_config,
    read_deployments,
    write_report,
)
from hadmc.scenario import generate_deployment

TINY_TRAIN = {"n_pi": 5, "n_mu": 30, "eval_every": 15, "b_pi": 32, "b_mu": 16, "pretrain_capacity": 100,
              "policy_capacity": 200, "n_eval_deployments": 2, "policy_delay": 2}


def write_cfg(tmp_path, **extra):
    doc = {"seed": 3, "output_dir": str(tmp_path / "out"),
           "scenario": {"type": "A", "n": 10, "m": 4, "count": 2},
           "model": {"hidden": [16, 16]}, "train": TINY_TRAIN,
           "sweep": {"kappa1": [1, 3], "kappa2": [1, 2], "samples": 200, "n_pi": 3, "b_pi": 32, "buffer": 100}}
    doc.update(extra)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return path


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_unknown_subcommand_exits_2(capsys):
    code, _, err = run(capsys, "frobnicate")
    assert code == 2
    assert json.loads(err.strip().splitlines()[-1])["error"] == "usage"


def test_bad_config_key_names_field(tmp_path, capsys):
    path = write_cfg(tmp_path, train={"n_mu": -1})
    code, _, err = run(capsys, "train", "--config", str(path))
    assert code == 2
    doc = json.loads(err.strip().splitlines()[-1])
    assert doc["error"] == "config" and doc["field"] == "train.n_mu"


def test_unknown_config_key(tmp_path):
    with pytest.raises(ConfigError) as exc:
        parse_config({"train": {"n_muu": 3}})
    assert exc.value.field_path == "train.n_muu"
    with pytest.raises(ConfigError):
        parse_config({"model": {"kind": "hyar"}})


def test_missing_config_file(tmp_path, capsys):
    code, _, err = run(capsys, "gen", "--config", str(tmp_path / "nope.json"))
    assert code == 2


def test_desk_scale_respects_explicit_values():
    cfg = parse_config({"train": {"n_mu": 40_000}}, desk_scale=True)
    assert cfg.train.n_mu == 40_000 and cfg.train.n_pi == 20_000 and cfg.train.dtype == "float32"
    assert parse_config({}).train.n_mu == 8_000_000


def test_gen_writes_named_deployments(tmp_path, capsys):
    path = write_cfg(tmp_path)
    code, out, _ = run(capsys, "gen", "--config", str(path))
    assert code == 0
    d = tmp_path / "out"
    assert sorted(p.name for p in d.glob("SA1_*.json")) == ["SA1_000.json", "SA1_001.json"]
    assert (d / "config.json").read_text() == path.read_text()
    items = read_deployments(d)
    assert [k for k, _ in items] == ["SA1_000", "SA1_001"]
    assert items == generate_set(load_config(path))


def test_train_eval_report_pipeline(tmp_path, capsys):
    path = write_cfg(tmp_path)
    code, _, err = run(capsys, "train", "--config", str(path), "--models", "hadmc,dqn_disc,td3_direct")
    assert code == 0, err
    out = tmp_path / "out"
    for kind in ("hadmc", "dqn_disc", "td3_direct"):
        assert (out / kind / "policy.json").exists()
        assert (out / kind / "train_report.csv").exists()
    code, _, err = run(capsys, "eval", "--config", str(path), "--models", "greedy,hadmc,dqn_disc,td3_direct")
    assert code == 0, err
    with open(out / "comparison.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        assert reader.fieldnames == COMPARISON_COLUMNS
        rows = list(reader)
    assert len(rows) == 4 * 2
    for r in rows:
        if float(r["completion_rate"]) == 1.0:
            parts = sum(float(r[c]) for c in ("t_obs", "t_chg", "t_wait", "t_fly"))
            assert parts == pytest.approx(float(r["completion_time"]), rel=1e-9)
        else:
            assert math.isnan(float(r["objective"]))

    code, _, _ = run(capsys, "report", str(out))
    assert code == 0
    first = {p.name: p.read_text() for p in (out / "report").glob("*.json")}
    assert {"reward_curves.json", "objective_bars.json", "time_assignment.json"} <= set(first)
    code, _, _ = run(capsys, "report", str(out))
    assert {p.name: p.read_text() for p in (out / "report").glob("*.json")} == first


def test_eval_without_models_fails(tmp_path, capsys):
    path = write_cfg(tmp_path)
    code, _, err = run(capsys, "eval", "--config", str(path), "--models", "hadmc")
    assert code == 1
    assert json.loads(err.strip().splitlines()[-1])["error"] == "runtime"


def test_greedy_command(tmp_path, capsys):
    path = write_cfg(tmp_path)
    code, _, _ = run(capsys, "greedy", "--config", str(path))
    assert code == 0
    assert len(list((tmp_path / "out" / "greedy_traces").glob("*.csv"))) == 2


def test_report_missing_inputs(tmp_path, capsys):
    with pytest.raises(ReportError) as exc:
        build_report(tmp_path)
    assert exc.value.missing == ["comparison.csv"]
    code, _, err = run(capsys, "report", str(tmp_path))
    assert code == 1 and json.loads(err.strip())["missing"] == ["comparison.csv"]


def test_report_rejects_bad_numbers(tmp_path):
    (tmp_path / "comparison.csv").write_text(",".join(COMPARISON_COLUMNS) + "\n"
                                             + "greedy,SA1,x,abc" + ",1" * (len(COMPARISON_COLUMNS) - 4) + "\n")
    with pytest.raises(ReportError):
        build_report(tmp_path)


def test_frequency_variance():
    import numpy as np

    assert frequency_variance(np.array([0, 1, 2, 3]), 4) == 0.0
    assert frequency_variance(np.array([0, 0, 0, 0]), 4) == pytest.approx(np.var([1, 0, 0, 0]))


def test_sweep_deterministic_and_heatmap_shape(tmp_path):
    spec = generate_deployment("A", 10, 4, seed=1)
    kw = dict(samples=300, seed=2, n_pi=3, b_pi=32, buffer_capacity=100, hidden=(16, 16))
    a = latent_dim_sweep(spec, [1, 3, 5], [1, 2], **kw)
    b = latent_dim_sweep(spec, [1, 3, 5], [1, 2], **kw)
    assert a == b and len(a) == 12
    assert all(r["variance"] >= 0 for r in a)
    from hadmc.harness import SWEEP_COLUMNS, rows_to_csv

    (tmp_path / "comparison.csv").write_text(",".join(COMPARISON_COLUMNS) + "\n")
    (tmp_path / "sweep.csv").write_text(rows_to_csv(a, SWEEP_COLUMNS))
    heat = build_report(tmp_path)["sweep_heatmap"]
    for pipe in ("embedding", "aae"):
        assert heat[pipe]["kappa1"] == [1, 3, 5] and heat[pipe]["kappa2"] == [1, 2]
        assert len(heat[pipe]["variance"]) == 3 and all(len(r) == 2 for r in heat[pipe]["variance"])
    write_report(tmp_path)


def test_sweep_command(tmp_path, capsys):
    path = write_cfg(tmp_path)
    code, _, err = run(capsys, "sweep", "--config", str(path))
    assert code == 0, err
    assert len((tmp_path / "out" / "sweep.csv").read_text().splitlines()) == 1 + 8


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "hadmc", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gen" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "hadmc"], capture_output=True, text=True)
    assert proc.returncode == 2
