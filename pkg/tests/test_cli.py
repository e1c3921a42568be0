import csv
import json
import shlex

import pytest

from fabricphys.cli import main
from fabricphys.config import CONFIG_ENV, RunConfig

TINY = {
    "materials": {"gray_interlock": {"bend_matrix": [[1.0] * 5] * 3}},
    "scene": {"sim": {"grid_n": 4, "duration": 0.5, "sample_rate": 10},
              "render": {"resolution": 16}},
    "net": {"input_size": 16, "channels": [2, 4], "fc_widths": [8, 4], "batch_size": 4},
    "train": {"triplets_per_epoch": 4},
    "bo": {"n_candidates": 64, "n_starts": 2, "kernel": {"n_restarts": 1}},
}


def parse(line):
    return dict(tok.split("=", 1) for tok in shlex.split(line))


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out.strip(), err


@pytest.fixture
def cfg_path(tmp_path):
    # the all-ones bend matrix only matters for plot-stiffness; keep physics stable elsewhere
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture
def phys_cfg(tmp_path):
    cfg = dict(TINY)
    cfg["materials"] = {}
    path = tmp_path / "phys.json"
    path.write_text(json.dumps(cfg))
    return path


def test_pipeline_end_to_end(tmp_path, capsys, phys_cfg):
    code, line, _ = run(capsys, "gen-dataset", "--config", phys_cfg, "--out", tmp_path / "d",
                        "--material", "gray_interlock", "--combos", 2, "--frames", 5, "--cameras", 1)
    assert code == 0
    s = parse(line)
    assert s["samples"] == "10" and s["failures"] == "0"
    assert s["config_digest"] == RunConfig.load(tmp_path / "d/run_config.json").digest()

    code, line, _ = run(capsys, "train", "--config", phys_cfg, "--out", tmp_path / "n",
                        "--manifest", tmp_path / "d/manifest.json", "--epochs", 30)
    assert code == 0
    s = parse(line)
    assert s["lr_schedule"].startswith("0.01@0,0.001@8,0.0001@16")
    assert len((tmp_path / "n/history.jsonl").read_text().splitlines()) == 30

    code, line, _ = run(capsys, "eval", "--config", phys_cfg, "--out", tmp_path / "e",
                        "--manifest", tmp_path / "d/manifest.json", "--net", tmp_path / "n/net.bin")
    assert code == 0
    report = json.loads((tmp_path / "e/eval.json").read_text())
    assert report["n_samples"] == 10 and float(parse(line)["accuracy"]) == report["accuracy"]

    code, line, _ = run(capsys, "make-target", "--config", phys_cfg, "--out", tmp_path / "t",
                        "--material", "gray_interlock", "--stiffness", 2.0, "--wind", 4.5,
                        "--area-weight", 0.2)
    assert code == 0 and parse(line)["frames"] == "5"

    code, line, _ = run(capsys, "estimate", "--config", phys_cfg, "--out", tmp_path / "x",
                        "--target", tmp_path / "t/manifest.json", "--net", tmp_path / "n/net.bin",
                        "--budget", 4)
    assert code == 0
    assert int(parse(line)["iterations"]) <= 4
    assert len((tmp_path / "x/trace.jsonl").read_text().splitlines()) <= 5  # + stop record
    est = json.loads((tmp_path / "x/estimate.json").read_text())
    assert est["target_params"]["wind_speed"] == 4.5


def test_simulate_writes_meshes(tmp_path, capsys, phys_cfg):
    code, line, _ = run(capsys, "simulate", "--config", phys_cfg, "--out", tmp_path,
                        "--material", "black_denim", "--wind", 3, "--area-weight", 0.33)
    assert code == 0 and parse(line)["frames"] == "5"
    assert (tmp_path / "frame_004.txt").read_text().startswith("verts 25 faces 32")


def test_gen_dataset_is_idempotent(tmp_path, capsys, phys_cfg):
    for d in ("a", "b"):
        assert run(capsys, "gen-dataset", "--config", phys_cfg, "--out", tmp_path / d,
                   "--material", "pink_nylon", "--combos", 2, "--frames", 2, "--cameras", 1,
                   "--seed", 4)[0] == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


@pytest.mark.parametrize("scale", [1.0, 2.0])
def test_plot_stiffness(tmp_path, capsys, cfg_path, scale):
    est = tmp_path / "estimate.json"
    est.write_text(json.dumps({"material": "gray_interlock",
                               "params": {"stiffness_scale": scale}}))
    code, line, _ = run(capsys, "plot-stiffness", "--config", cfg_path, "--out", tmp_path / "p",
                        "--estimate", est)
    assert code == 0
    rows = list(csv.reader((tmp_path / "p/stiffness.csv").open()))
    assert len(rows) == 3 and all(len(r) == 5 for r in rows)
    assert all(float(v) == scale for r in rows for v in r)
    svg = (tmp_path / "p/stiffness.svg").read_text()
    assert svg.startswith("<svg") and svg.count("<rect") == 15
    assert "bend angle (row index)" in svg


def test_missing_estimate_exits_1(tmp_path, capsys, cfg_path):
    code, _, err = run(capsys, "plot-stiffness", "--config", cfg_path, "--out", tmp_path,
                       "--estimate", tmp_path / "nope.json")
    assert code == 1 and "nope.json" in err


def test_bad_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"net": {"widths": 3}}))
    assert run(capsys, "simulate", "--config", bad, "--out", tmp_path, "--material",
               "black_denim", "--wind", 3, "--area-weight", 0.33)[0] == 2
    bad.write_text("{not json")
    assert run(capsys, "simulate", "--config", bad, "--out", tmp_path, "--material",
               "black_denim", "--wind", 3, "--area-weight", 0.33)[0] == 2
    bad.write_text(json.dumps({"materials": {"x": {"area_weight_range": [0.3, 0.1]}}}))
    assert run(capsys, "simulate", "--config", bad, "--out", tmp_path, "--material",
               "black_denim", "--wind", 3, "--area-weight", 0.33)[0] == 2


def test_module_error_exits_1(tmp_path, capsys):
    unstable = tmp_path / "unstable.json"
    unstable.write_text(json.dumps({"scene": {"sim": {"grid_n": 6, "dt": 0.01}}}))
    code, _, err = run(capsys, "simulate", "--config", unstable, "--out", tmp_path,
                       "--material", "black_denim", "--wind", 3, "--area-weight", 0.33)
    assert code == 1 and "dt=0.01" in err


def test_out_of_range_parameter_exits_2(tmp_path, capsys, phys_cfg):
    code, _, err = run(capsys, "simulate", "--config", phys_cfg, "--out", tmp_path,
                       "--material", "black_denim", "--wind", 3, "--area-weight", 0.9)
    assert code == 2 and "area" in err.lower()


def test_unknown_material_is_config_error(tmp_path, capsys, phys_cfg):
    assert run(capsys, "simulate", "--config", phys_cfg, "--out", tmp_path, "--material",
               "silk", "--wind", 3, "--area-weight", 0.2)[0] == 2


def test_usage_error_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 2


def test_config_from_environment(tmp_path, capsys, phys_cfg, monkeypatch):
    monkeypatch.setenv(CONFIG_ENV, str(phys_cfg))
    code, line, _ = run(capsys, "simulate", "--out", tmp_path, "--material", "black_denim",
                        "--wind", 3, "--area-weight", 0.33)
    assert code == 0 and parse(line)["frames"] == "5"


def test_run_config_roundtrip():
    cfg = RunConfig.from_dict(TINY)
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.with_seed(7).net.seed == 7 and cfg.with_seed(7).bo.seed == 7
