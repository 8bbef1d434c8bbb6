import csv
import json
from pathlib import Path

import numpy as np
import pytest

from stablecast.cli import main
from stablecast.config import ConfigError, apply_cell, load_experiment, load_grid, parse_experiment
from stablecast.data import SynthSpec, read_long, synthesize, write_long
from stablecast.evaluation import read_panels

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    p = tmp_path_factory.mktemp("data") / "series.csv"
    write_long(p, synthesize(SynthSpec(n_series=8, length=60), seed=5))
    return p


def _config(tmp_path, dataset, **over):
    doc = {
        "name": "tiny",
        "dataset": {"path": str(dataset), "format": "long"},
        "model": {"num_blocks": 1, "lookback": 12, "horizon": 6, "hidden_width": 4},
        "train": {"iterations": 3, "learning_rate": 1e-3, "batch_size": 8, "origin_range": 12},
        "dlw": {"policy": "tarw", "kappa": 0.35},
        "ensemble_size": 2,
        "output_dir": str(tmp_path / "run"),
    }
    for k, v in over.items():
        doc[k] = v
    p = tmp_path / "config.json"
    p.write_text(json.dumps(doc, indent=2))
    return p


# configuration -------------------------------------------------------------

@pytest.mark.parametrize("path", sorted(CONFIGS.glob("[md]*.json")), ids=lambda p: p.stem)
def test_shipped_configs_roundtrip(path):
    cfg = load_experiment(path)
    again = parse_experiment(cfg.to_json())
    assert again == cfg
    assert cfg.seed_list == list(range(1, cfg.ensemble_size + 1))


def test_table_config_values():
    m3 = load_experiment(CONFIGS / "m3_tarw.json")
    assert (m3.model.num_blocks, m3.model.hidden_width, m3.model.lookback) == (20, 256, 36)
    assert (m3.train.batch_size, m3.train.origin_range, m3.train.iterations) == (512, 120, 9000)
    assert m3.dlw.kappa == 0.35 and m3.train.learning_rate == 1e-5
    m4 = load_experiment(CONFIGS / "m4_tarw.json")
    assert (m4.model.lookback, m4.train.origin_range, m4.train.iterations) == (24, 60, 23808)


def test_unknown_key_reports_line():
    text = '{\n  "dataset": {"path": "x.csv"},\n  "trian": {}\n}'
    with pytest.raises(ConfigError, match=r"<config>:3: trian"):
        parse_experiment(text)


def test_bad_value_reports_nested_line():
    text = '{\n  "dataset": {"path": "x.csv"},\n  "dlw": {\n    "policy": "tarw",\n    "kappa": 1.7\n  }\n}'
    with pytest.raises(ConfigError, match=r"<config>:5: dlw.kappa"):
        parse_experiment(text)


def test_invalid_json_reports_position():
    with pytest.raises(ConfigError, match=r"<config>:2:"):
        parse_experiment('{\n  "dataset": ,\n}')


def test_seed_list_must_match_ensemble_size():
    with pytest.raises(ConfigError):
        parse_experiment('{"dataset": {"path": "x"}, "ensemble_size": 3, "seeds": [1, 2]}')


def test_grid_spec(tmp_path):
    g = tmp_path / "g.json"
    g.write_text('{"parameters": {"kappa": [0.15, 0.35], "learning_rate": [1e-3]}}')
    spec = load_grid(g)
    assert spec.cells() == [{"kappa": 0.15, "learning_rate": 1e-3}, {"kappa": 0.35, "learning_rate": 1e-3}]
    cfg = parse_experiment('{"dataset": {"path": "x"}}')
    assert apply_cell(cfg, {"kappa": 0.25, "iterations": 7.0}).train.iterations == 7
    g.write_text('{"parameters": {"width": [1]}}')
    with pytest.raises(ConfigError, match="unknown grid parameter"):
        load_grid(g)
    with pytest.raises(ConfigError):
        apply_cell(cfg, {"kappa": 1.5})


# train ---------------------------------------------------------------------

def test_unknown_key_exits_2(tmp_path, dataset, capsys):
    cfg = _config(tmp_path, dataset, extra_field=1)
    assert main(["train", "--config", str(cfg)]) == 2
    assert "extra_field" in capsys.readouterr().err
    assert not (tmp_path / "run").exists()


def test_missing_dataset_exits_2_without_outputs(tmp_path, dataset):
    cfg = _config(tmp_path, tmp_path / "nope.csv")
    assert main(["train", "--config", str(cfg)]) == 2
    assert sorted(p.name for p in tmp_path.iterdir()) == ["config.json"]


def test_train_five_seeds_writes_members_and_manifest(tmp_path, dataset):
    cfg = _config(tmp_path, dataset)
    out = tmp_path / "k035"
    assert main(["train", "--config", str(cfg), "--seeds", "1..5", "--out", str(out)]) == 0
    assert len(list(out.glob("member_*/checkpoint.json"))) == 5
    assert len(list(out.glob("member_*/runlog.csv"))) == 5
    assert len(list(out.glob("*.json"))) == 1
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seeds"] == [1, 2, 3, 4, 5]
    assert manifest["config"]["dlw"]["kappa"] == 0.35
    assert len(manifest["dataset_sha256"]) == 64
    # leak audit: the latest index touched stays before validation and test (final fit: before test)
    series = {s.id: s.n for s in read_long(dataset)}
    audit = manifest["leak_audit"]
    assert audit["min_gap_before_test"] >= 0
    for sid, idx in audit["max_index_used"].items():
        assert idx <= series[sid] - 18 - 1
    assert not list(tmp_path.glob(".k035.*"))


def test_train_refuses_nonempty_output(tmp_path, dataset):
    cfg = _config(tmp_path, dataset)
    (tmp_path / "run").mkdir()
    (tmp_path / "run" / "x").write_text("x")
    assert main(["train", "--config", str(cfg)]) == 2


def test_training_is_reproducible_from_manifest(tmp_path, dataset):
    cfg = _config(tmp_path, dataset, dlw={"policy": "gradnorm", "alpha": 1.5})
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    replay = tmp_path / "replay.json"
    doc = dict(manifest["config"], output_dir=str(tmp_path / "b"))
    replay.write_text(json.dumps(doc))
    assert main(["train", "--config", str(replay)]) == 0
    for seed in manifest["seeds"]:
        for f in ("checkpoint.json", "runlog.csv", "lambda.csv"):
            a = (tmp_path / "a" / f"member_{seed}" / f).read_bytes()
            b = (tmp_path / "b" / f"member_{seed}" / f).read_bytes()
            assert a == b


# grid ----------------------------------------------------------------------

def test_one_cell_grid_selects_that_cell(tmp_path, dataset):
    cfg = _config(tmp_path, dataset)
    grid = tmp_path / "grid.json"
    grid.write_text('{"parameters": {"kappa": [0.25]}}')
    assert main(["grid", "--config", str(cfg), "--grid", str(grid), "--out", str(tmp_path / "g")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "g" / "grid_report.csv")))
    assert len(rows) == 1 and rows[0]["rank"] == "1" and rows[0]["status"] == "ok"
    best = json.loads((tmp_path / "g" / "best_config.json").read_text())
    assert best["dlw"]["kappa"] == 0.25


def test_grid_report_rows_equal_cells(tmp_path, dataset):
    cfg = _config(tmp_path, dataset)
    grid = tmp_path / "grid.json"
    grid.write_text('{"parameters": {"kappa": [0.15, 0.35, 0.55]}}')
    assert main(["grid", "--config", str(cfg), "--grid", str(grid), "--out", str(tmp_path / "g")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "g" / "grid_report.csv")))
    assert [float(r["kappa"]) for r in rows] == [0.15, 0.35, 0.55]
    assert sorted(int(r["rank"]) for r in rows) == [1, 2, 3]
    best = min(rows, key=lambda r: float(r["validation_smape"]))
    assert json.loads((tmp_path / "g" / "best_config.json").read_text())["dlw"]["kappa"] == float(best["kappa"])


def test_grid_all_cells_failing_exits_3(tmp_path, dataset):
    # every series is shorter than lookback + windows, so no cell can train
    short = tmp_path / "short.csv"
    write_long(short, synthesize(SynthSpec(n_series=3, length=40), seed=1))
    cfg = _config(tmp_path, short)
    grid = tmp_path / "grid.json"
    grid.write_text('{"parameters": {"kappa": [0.2, 0.3]}}')
    assert main(["grid", "--config", str(cfg), "--grid", str(grid), "--out", str(tmp_path / "g")]) == 3
    rows = list(csv.DictReader(open(tmp_path / "g" / "grid_report.csv")))
    assert len(rows) == 2 and all(r["status"] != "ok" for r in rows)


# forecast / score / mcb / report ---------------------------------------------

@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    tmp = tmp_path_factory.mktemp("trained")
    runs = []
    for name, dlw in (("static", {"policy": "static", "lambda_static": 0.15}), ("rw", {"policy": "rw"})):
        cfg = _config(tmp, dataset, name=name, dlw=dlw, output_dir=str(tmp / name))
        assert main(["train", "--config", str(cfg)]) == 0
        runs.append(tmp / name)
    return tmp, runs


def test_forecast_score_mcb_with_imported_method(trained, dataset, tmp_path):
    tmp, runs = trained
    f1, f2 = tmp_path / "static.csv", tmp_path / "naive.csv"
    assert main(["forecast", "--run", str(runs[0]), "--out", str(f1)]) == 0
    assert main(["forecast", "--baseline", "seasonal-naive", "--dataset", str(dataset), "--out", str(f2)]) == 0
    panel = read_panels(f1)["static"]
    assert len(panel) == 8 and next(iter(panel.forecasts.values())).shape == (13, 6)

    # an externally produced method in the import schema
    imported = tmp_path / "theta.csv"
    with open(imported, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "series_id", "origin", "step", "forecast"])
        for sid, mat in read_panels(f2)["seasonal_naive"].forecasts.items():
            for o in range(13):
                for i in range(6):
                    w.writerow(["theta", sid, o + 1, i + 1, mat[o, i] * 1.01])

    out = tmp_path / "scores"
    assert main(["score", "--forecasts", str(f1), str(f2), str(imported), "--dataset", str(dataset),
                 "--out", str(out)]) == 0
    summary = list(csv.DictReader(open(out / "summary.csv")))
    assert [r["method"] for r in summary] == ["static", "seasonal_naive", "theta"]
    assert main(["mcb", "--scores", str(out / "scores.csv"), "--out", str(tmp_path / "mcb")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "mcb" / "mcb_smape.csv")))
    assert len(rows) == 3
    assert (tmp_path / "mcb" / "mcb_smapc.svg").read_text().startswith("<svg")


def test_seasonal_naive_forecasts_repeat_last_season(dataset, tmp_path):
    out = tmp_path / "naive.csv"
    assert main(["forecast", "--baseline", "seasonal-naive", "--dataset", str(dataset), "--out", str(out)]) == 0
    s = read_long(dataset)[0]
    mat = read_panels(out)["seasonal_naive"].forecasts[s.id]
    start = s.n - 18
    np.testing.assert_array_equal(mat[0], s.values[start - 12 : start - 6])


def test_validation_window_forecast_never_sees_test(trained, dataset, tmp_path):
    tmp, runs = trained
    out = tmp_path / "val.csv"
    assert main(["forecast", "--run", str(runs[0]), "--window", "validation", "--out", str(out)]) == 0
    assert next(iter(read_panels(out)["static"].forecasts.values())).shape == (13, 6)


def test_report_is_idempotent(trained, tmp_path, dataset):
    tmp, runs = trained
    grid_out = tmp_path / "g"
    cfg = _config(tmp_path, dataset)
    grid = tmp_path / "grid.json"
    grid.write_text('{"parameters": {"kappa": [0.15, 0.35]}}')
    assert main(["grid", "--config", str(cfg), "--grid", str(grid), "--out", str(grid_out)]) == 0
    f = tmp_path / "f.csv"
    main(["forecast", "--run", str(runs[0]), "--out", str(f)])
    main(["forecast", "--baseline", "seasonal-naive", "--dataset", str(dataset), "--out", str(tmp_path / "n.csv")])
    main(["score", "--forecasts", str(f), str(tmp_path / "n.csv"), "--dataset", str(dataset), "--out", str(tmp_path / "s")])

    args = ["report", "--runs", *map(str, runs), str(tmp_path / "missing"), "--grid-report",
            str(grid_out / "grid_report.csv"), "--scores", str(tmp_path / "s" / "scores.csv")]
    assert main(args + ["--out", str(tmp_path / "r1")]) == 0
    assert main(args + ["--out", str(tmp_path / "r2")]) == 0
    names = sorted(p.name for p in (tmp_path / "r1").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "r2").iterdir())
    for n in names:
        assert (tmp_path / "r1" / n).read_bytes() == (tmp_path / "r2" / n).read_bytes()
    assert {"static_lambda.svg", "rw_lambda.svg", "static_cosine.svg", "grid_kappa_smape.svg",
            "grid_kappa_smapc.svg", "summary.csv", "mcb_smape.svg", "mcb_smapc.csv"} <= set(names)


def test_static_run_lambda_is_flat(trained):
    tmp, runs = trained
    for member in runs[0].glob("member_*"):
        lam = [float(r["lambda"]) for r in csv.DictReader(open(member / "lambda.csv"))]
        assert set(lam) == {0.15}


def test_synthesize_and_ingest_commands(tmp_path):
    out = tmp_path / "s.csv"
    assert main(["synthesize", "--n-series", "5", "--length", "50", "--seed", "3", "--out", str(out)]) == 0
    first = out.read_bytes()
    assert main(["synthesize", "--n-series", "5", "--length", "50", "--seed", "3", "--out", str(out)]) == 0
    assert out.read_bytes() == first
    m4 = tmp_path / "m4.csv"
    m4.write_text('"V1","V2","V3"\n' + "".join(f"M{i}," + ",".join(str(100 + j + i) for j in range(60)) + "\n"
                                                for i in range(3)) + "M9,1,2,3\n")
    assert main(["ingest", "--dataset", str(m4), "--format", "m4", "--out", str(tmp_path / "ing")]) == 0
    assert [s.id for s in read_long(tmp_path / "ing" / "series.csv")] == ["M0", "M1", "M2"]
    assert "M9" in (tmp_path / "ing" / "exclusions.txt").read_text()
    bad = tmp_path / "bad.csv"
    bad.write_text("M1,1,-3\n")
    assert main(["ingest", "--dataset", str(bad), "--format", "m4", "--out", str(tmp_path / "x")]) == 2
