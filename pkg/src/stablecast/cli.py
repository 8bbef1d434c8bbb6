"""Command-line entry point.

Exit codes: 0 ok, 2 configuration error, 3 runtime or training error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, apply_cell, load_experiment, load_grid
from .data import IngestError, SynthSpec, TimeSeries, ingest, split, synthesize, write_long
from .dlw import write_trajectory
from .evaluation import (
    actual_panel,
    mcb,
    read_panels,
    read_scores,
    roll_forecasts,
    score,
    score_matrix,
    seasonal_naive,
    write_scores,
    write_summary,
)
from .model import load_checkpoint, save_checkpoint
from .svg import line_plot, mcb_plot
from .trainer import TrainingAborted, ensemble_forecast, train

log = logging.getLogger("stablecast")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class RuntimeFailure(RuntimeError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_dataset(path, fmt) -> List[TimeSeries]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"dataset not found: {p}")
    try:
        return ingest(p, fmt)
    except IngestError as exc:
        raise ConfigError(f"{p}: {exc}") from None


def _parse_seeds(text: Optional[str]) -> Optional[List[int]]:
    if text is None:
        return None
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            a, b = part.split("..")
            seeds.extend(range(int(a), int(b) + 1))
        elif part:
            seeds.append(int(part))
    return seeds


def _override(config: ExperimentConfig, args) -> ExperimentConfig:
    doc = config.model_dump()
    if getattr(args, "dataset", None):
        doc["dataset"]["path"] = args.dataset
    if getattr(args, "format", None):
        doc["dataset"]["format"] = args.format
    if getattr(args, "out", None):
        doc["output_dir"] = args.out
    seeds = _parse_seeds(getattr(args, "seeds", None))
    if seeds is not None:
        doc["seeds"] = seeds
        doc["ensemble_size"] = len(seeds)
    try:
        return ExperimentConfig.model_validate(doc)
    except Exception as exc:  # pydantic ValidationError
        raise ConfigError(str(exc)) from None


# ingest / synthesize ---------------------------------------------------------


def cmd_ingest(args) -> int:
    series = _load_dataset(args.dataset, args.format)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kept, excluded = [], []
    for s in series:
        try:
            split(s)
            kept.append(s)
        except ValueError as exc:
            excluded.append(f"{s.id}\t{exc}")
    write_long(out / "series.csv", kept)
    (out / "exclusions.txt").write_text("".join(line + "\n" for line in excluded))
    log.info("ingested %d series (%d excluded)", len(kept), len(excluded))
    return EXIT_OK


def cmd_synthesize(args) -> int:
    series = synthesize(SynthSpec(n_series=args.n_series, length=args.length), seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_long(out, series)
    return EXIT_OK


# train -----------------------------------------------------------------------


def _run_member(job):
    series, config, seed, member_dir = job
    params, runlog = train(series, config.train_config(seed), final_fit=config.final_fit,
                           split_spec=config.split_spec())
    member_dir = Path(member_dir)
    member_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(member_dir / "checkpoint.json", params, config.network_config(), extra={"seed": seed})
    runlog.write_csv(member_dir / "runlog.csv")
    write_trajectory(member_dir / "lambda.csv", runlog.records)
    return seed, runlog.max_index_used


def run_experiment(config: ExperimentConfig, workers: int = 1) -> Path:
    """Train all ensemble members and write checkpoints, logs and the manifest."""
    series = _load_dataset(config.dataset.path, config.dataset.format)
    out = Path(config.output_dir)
    if out.exists() and any(out.iterdir()):
        raise ConfigError(f"output directory {out} is not empty")
    # build in a sibling temp dir, move into place when complete
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        jobs = [(series, config, s, tmp / f"member_{s}") for s in config.seed_list]
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_run_member, jobs))
        else:
            results = [_run_member(j) for j in jobs]
        lengths = {s.id: s.n for s in series}
        test_len = config.split.test_length
        max_used = {}
        for _, used in results:
            for sid, idx in used.items():
                max_used[sid] = max(idx, max_used.get(sid, -1))
        gaps = [lengths[sid] - test_len - 1 - idx for sid, idx in max_used.items()]
        manifest = {
            "version": __version__,
            "config": config.model_dump(),
            "seeds": config.seed_list,
            "dataset_sha256": sha256_file(config.dataset.path),
            "members": [
                {
                    "seed": seed,
                    "checkpoint": f"member_{seed}/checkpoint.json",
                    "runlog": f"member_{seed}/runlog.csv",
                    "lambda": f"member_{seed}/lambda.csv",
                    "checkpoint_sha256": sha256_file(tmp / f"member_{seed}" / "checkpoint.json"),
                }
                for seed, _ in results
            ],
            "leak_audit": {
                "test_length": test_len,
                "max_index_used": max_used,
                "min_gap_before_test": int(min(gaps)) if gaps else None,
            },
        }
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        if out.exists():
            out.rmdir()
        tmp.rename(out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out


def cmd_train(args) -> int:
    config = _override(load_experiment(args.config), args)
    out = run_experiment(config, workers=args.workers)
    print(out / "manifest.json")
    return EXIT_OK


def load_run(run_dir):
    """(config, member parameter sets) from a train output directory."""
    run_dir = Path(run_dir)
    mpath = run_dir / "manifest.json"
    if not mpath.is_file():
        raise ConfigError(f"no manifest in {run_dir}")
    manifest = json.loads(mpath.read_text())
    config = ExperimentConfig.model_validate(manifest["config"])
    members = [load_checkpoint(run_dir / m["checkpoint"])[0] for m in manifest["members"]]
    return config, members, manifest


# grid --------------------------------------------------------------------------


def _grid_cell(job):
    series, cell_config, seed = job
    mcfg = cell_config.network_config()
    params, _ = train(series, cell_config.train_config(seed), final_fit=False, split_spec=cell_config.split_spec())
    trimmed = [TimeSeries(s.id, s.values[: s.n - cell_config.split.test_length]) for s in series]
    panel = roll_forecasts(lambda x: ensemble_forecast([params], mcfg, x), trimmed, mcfg.lookback,
                           horizon=mcfg.horizon, window=cell_config.split.validation_length)
    table = score(panel, actual_panel(trimmed, mcfg.horizon, cell_config.split.validation_length))
    return table.mean_smape, table.mean_smapc


def run_grid(config: ExperimentConfig, grid, out: Path, workers: int = 1):
    series = _load_dataset(config.dataset.path, config.dataset.format)
    cells = grid.cells()
    cell_configs = [apply_cell(config, c) for c in cells]
    seed = config.seed_list[0]
    jobs = [(series, cc, seed) for cc in cell_configs]
    results = []

    def safe(job):
        try:
            return _grid_cell(job), ""
        except Exception as exc:  # recorded, grid continues
            log.error("grid cell failed: %s", exc)
            return (float("nan"), float("nan")), f"{type(exc).__name__}: {exc}"

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_grid_cell, j) for j in jobs]
            for f in futures:
                try:
                    results.append((f.result(), ""))
                except Exception as exc:
                    results.append(((float("nan"), float("nan")), f"{type(exc).__name__}: {exc}"))
    else:
        results = [safe(j) for j in jobs]

    out.mkdir(parents=True, exist_ok=True)
    names = list(grid.parameters)
    ok = [i for i, (_, err) in enumerate(results) if not err]
    order = sorted(ok, key=lambda i: (results[i][0][0], i))
    rank = {i: r + 1 for r, i in enumerate(order)}
    with open(out / "grid_report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell", *names, "validation_smape", "validation_smapc", "rank", "status"])
        for i, (cell, ((sm, sc), err)) in enumerate(zip(cells, results)):
            w.writerow([i, *[repr(cell[n]) for n in names], repr(sm), repr(sc), rank.get(i, ""), err or "ok"])
    if not order:
        raise RuntimeFailure("every grid cell failed")
    best = cell_configs[order[0]]
    (out / "best_config.json").write_text(best.to_json())
    return order[0], results


def cmd_grid(args) -> int:
    config = _override(load_experiment(args.config), args)
    grid = load_grid(args.grid)
    out = Path(args.out or config.output_dir)
    best, _ = run_grid(config, grid, out, workers=args.workers)
    print(out / "best_config.json")
    return EXIT_OK


# forecast / score / mcb ------------------------------------------------------------


def cmd_forecast(args) -> int:
    if args.baseline:
        if not args.dataset:
            raise ConfigError("--baseline needs --dataset")
        series = _load_dataset(args.dataset, args.format or "long")
        panel = roll_forecasts(seasonal_naive, series, 12, method="seasonal_naive")
    else:
        if not args.run:
            raise ConfigError("forecast needs --run DIR or --baseline")
        config, members, _ = load_run(args.run)
        series = _load_dataset(args.dataset or config.dataset.path, args.format or config.dataset.format)
        mcfg = config.network_config()
        window = config.split.test_length
        if args.window == "validation":
            series = [TimeSeries(s.id, s.values[: s.n - config.split.test_length]) for s in series]
            window = config.split.validation_length
        panel = roll_forecasts(lambda x: ensemble_forecast(members, mcfg, x), series, mcfg.lookback,
                               method=args.method or config.name, horizon=mcfg.horizon, window=window)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    panel.write_csv(out)
    return EXIT_OK


def cmd_score(args) -> int:
    series = _load_dataset(args.dataset, args.format)
    panels = []
    for path in args.forecasts:
        if not Path(path).is_file():
            raise ConfigError(f"forecast file not found: {path}")
        panels.extend(read_panels(path).values())
    tables = []
    for p in panels:
        h = next(iter(p.forecasts.values())).shape[1] if p.forecasts else 6
        tables.append(score(p, actual_panel(series, horizon=h)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_scores(out / "scores.csv", tables)
    write_summary(out / "summary.csv", tables)
    for t in tables:
        print(f"{t.method:24s} sMAPE {t.mean_smape:8.4f}  sMAPC {t.mean_smapc:8.4f}")
    return EXIT_OK


def _write_mcb(tables, metric, alpha, out: Path) -> None:
    mat, methods, _ = score_matrix(tables, metric)
    res = mcb(mat, methods, alpha)
    res.write_csv(out / f"mcb_{metric}.csv")
    label = "sMAPE" if metric == "smape" else "sMAPC"
    (out / f"mcb_{metric}.svg").write_text(
        mcb_plot(res.methods, res.avg_rank, res.lower, res.upper, res.best, f"MCB: {label} ranking")
    )


def cmd_mcb(args) -> int:
    if not Path(args.scores).is_file():
        raise ConfigError(f"scores file not found: {args.scores}")
    tables = read_scores(args.scores)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for metric in args.metric:
        _write_mcb(tables, metric, args.alpha, out)
    return EXIT_OK


# report ------------------------------------------------------------------------


def _read_csv_columns(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows


def _floats(rows, key):
    return np.array([float(r[key]) if r[key] != "" else np.nan for r in rows])


def cmd_report(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for run in args.runs or []:
        run = Path(run)
        mpath = run / "manifest.json"
        if not mpath.is_file():
            log.warning("skipping %s: no manifest", run)
            continue
        manifest = json.loads(mpath.read_text())
        name = manifest["config"]["name"]
        lam_curves, cos_curves = [], []
        for m in manifest["members"]:
            path = run / m["lambda"]
            if not path.is_file():
                log.warning("skipping member %s of %s: no lambda log", m["seed"], run)
                continue
            rows = _read_csv_columns(path)
            it = _floats(rows, "iteration")
            lam_curves.append((f"seed {m['seed']}", it, _floats(rows, "lambda")))
            cos_curves.append((f"seed {m['seed']}", it, _floats(rows, "cosine_similarity")))
        if not lam_curves:
            continue
        scatter = manifest["config"]["dlw"]["policy"] in ("rw", "tarw", "gcossim")
        (out / f"{name}_lambda.svg").write_text(
            line_plot(lam_curves[:1] if scatter else lam_curves, f"{name}: lambda per iteration", "iteration",
                      "lambda", markers=scatter, ylim=(0.0, 1.0))
        )
        (out / f"{name}_cosine.svg").write_text(
            line_plot(cos_curves, f"{name}: gradient cosine similarity", "iteration", "cosine similarity",
                      ylim=(-1.0, 1.0))
        )
    if args.grid_report:
        path = Path(args.grid_report)
        if not path.is_file():
            log.warning("skipping grid plots: %s missing", path)
        else:
            rows = [r for r in _read_csv_columns(path) if r["status"] == "ok"]
            params = [c for c in rows[0] if c not in ("cell", "validation_smape", "validation_smapc", "rank", "status")] if rows else []
            if len(params) == 1:
                p = params[0]
                rows.sort(key=lambda r: float(r[p]))
                xs = _floats(rows, p)
                (out / f"grid_{p}_smape.svg").write_text(
                    line_plot([("validation sMAPE", xs, _floats(rows, "validation_smape"))],
                              f"validation sMAPE vs {p}", p, "sMAPE"))
                (out / f"grid_{p}_smapc.svg").write_text(
                    line_plot([("validation sMAPC", xs, _floats(rows, "validation_smapc"))],
                              f"validation sMAPC vs {p}", p, "sMAPC"))
            else:
                log.warning("grid plots need a one-parameter grid; got %s", params)
    if args.scores:
        if not Path(args.scores).is_file():
            log.warning("skipping tables: %s missing", args.scores)
        else:
            tables = read_scores(args.scores)
            write_summary(out / "summary.csv", tables)
            if len(tables) >= 2:
                for metric in ("smape", "smapc"):
                    _write_mcb(tables, metric, args.alpha, out)
    return EXIT_OK


# wiring --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stablecast", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="convert M4-style or long CSV to the canonical long CSV")
    s.add_argument("--dataset", required=True)
    s.add_argument("--format", choices=("m4", "long"), required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("synthesize", help="write synthetic monthly series")
    s.add_argument("--n-series", type=int, default=200)
    s.add_argument("--length", type=int, default=120)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synthesize)

    def common(s):
        s.add_argument("--config", required=True)
        s.add_argument("--out")
        s.add_argument("--seeds", help="comma list or range, e.g. 1..5")
        s.add_argument("--workers", type=int, default=1)
        s.add_argument("--dataset")
        s.add_argument("--format", choices=("m4", "long"))

    s = sub.add_parser("train", help="train an ensemble from an experiment config")
    common(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("grid", help="grid search selected on validation sMAPE")
    common(s)
    s.add_argument("--grid", required=True)
    s.set_defaults(func=cmd_grid)

    s = sub.add_parser("forecast", help="rolling-origin forecasts of a trained ensemble or baseline")
    s.add_argument("--run")
    s.add_argument("--baseline", choices=("seasonal-naive",))
    s.add_argument("--dataset")
    s.add_argument("--format", choices=("m4", "long"))
    s.add_argument("--window", choices=("test", "validation"), default="test")
    s.add_argument("--method")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_forecast)

    s = sub.add_parser("score", help="sMAPE/sMAPC of forecast CSVs")
    s.add_argument("--forecasts", nargs="+", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--format", choices=("m4", "long"), default="long")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("mcb", help="multiple comparisons with the best")
    s.add_argument("--scores", required=True)
    s.add_argument("--metric", nargs="+", choices=("smape", "smapc"), default=["smape", "smapc"])
    s.add_argument("--alpha", type=float, choices=(0.05, 0.10), default=0.05)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mcb)

    s = sub.add_parser("report", help="tables and diagnostic plots")
    s.add_argument("--runs", nargs="*")
    s.add_argument("--grid-report")
    s.add_argument("--scores")
    s.add_argument("--alpha", type=float, choices=(0.05, 0.10), default=0.05)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(name)s: %(message)s")
    if args.command in ("train", "grid"):
        logging.getLogger("stablecast.trainer").setLevel(logging.INFO)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, RuntimeFailure) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        log.exception("unexpected failure")
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
