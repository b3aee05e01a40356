"""Command-line entry point: ``gia gen|train|ablate|bench``.

Configuration comes from an optional ``--config`` file of ``key=value`` lines
plus repeatable ``--set key=value`` overrides (see :mod:`gia.runconfig`).
Exit status is 0 on success, 1 for invalid input or configuration and 2 when
a run fails.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from . import bench
from .attention import PE_MODES
from .errors import ConfigError, GenerationError, ShapeError, TrainingError, ValidationError
from .graph import Graph, load_graph, minmax_normalize, stratified_split
from .runconfig import RunConfig, load_config_file, parse_overrides
from .seeding import stream
from .synthgen import generate_with_metadata, save_dataset
from .training import train

log = logging.getLogger("gia")

RESULTS_VERSION = 1
ABLATION_HEADER = ["mode", "mean_f1", "std_f1", "median_f1", "delta_f1", "median_delta_f1"]


# --- shared pipeline ------------------------------------------------------

def load_dataset(cfg: RunConfig) -> tuple[Graph, str]:
    if cfg.dataset is not None:
        return load_graph(cfg.dataset, n_classes=cfg.n_classes), "file"
    return generate_with_metadata(cfg.synth).graph, "synthetic"


def dataset_summary(graph: Graph) -> dict:
    counts = np.bincount(graph.labels, minlength=graph.n_classes)
    out = {"n_nodes": graph.n_nodes, "n_edges": graph.n_edges, "n_classes": graph.n_classes,
           "class_counts": counts.tolist()}
    if graph.n_classes == 2:
        out["positive_rate"] = float(counts[1] / graph.n_nodes)
    return out


def run_seed(graph: Graph, cfg: RunConfig, seed: int, pe_mode: Optional[str] = None) -> dict:
    """split -> normalize -> train -> test metrics for one seed."""
    t0 = time.perf_counter()
    masks = stratified_split(graph.labels, seed=stream(seed, "split"))
    normalized = minmax_normalize(graph, masks, cfg.norm_mode)
    model_config = cfg.model_config(graph.node_features.shape[1], pe_mode)
    _, report = train(normalized, masks, model_config, cfg.train_config(seed))
    return {
        "seed": seed,
        "test_f1": report.test_f1,
        "test_auc": report.test_auc,
        "best_epoch": report.best_epoch,
        "best_val_f1": report.val_f1[report.best_epoch],
        "final_train_loss": report.train_loss[-1],
        "report": report.to_dict(),
        "seconds": time.perf_counter() - t0,
    }


def _run_seed_job(args):
    return run_seed(*args)


def run_seeds(graph: Graph, cfg: RunConfig, pe_mode: Optional[str] = None) -> list[dict]:
    """All seeds, optionally in worker processes; results come back in seed order."""
    jobs = [(graph, cfg, s, pe_mode) for s in cfg.run_seeds()]
    if cfg.workers == 1 or len(jobs) == 1:
        out = []
        for job in jobs:
            res = run_seed(*job)
            log.info("pe_mode=%s seed=%d test_f1=%.4f", pe_mode or cfg.pe_mode, res["seed"], res["test_f1"])
            out.append(res)
        return out
    with ProcessPoolExecutor(max_workers=min(cfg.workers, len(jobs))) as pool:
        return list(pool.map(_run_seed_job, jobs))


def describe(values: list) -> dict:
    """Mean, population std and median; all None if any value is missing."""
    if any(v is None for v in values):
        return {"mean": None, "std": None, "median": None}
    arr = np.asarray(values, dtype=float)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "median": float(np.median(arr))}


def _diff(a, b):
    return None if a is None or b is None else a - b


def compute_delta(results: dict, baseline: dict) -> dict:
    """This run minus ``baseline`` for each summary statistic."""
    delta = {"baseline_pe_mode": baseline["config"]["pe_mode"]}
    for metric in ("test_f1", "test_auc"):
        ours, theirs = results["summary"][metric], baseline["summary"][metric]
        delta[metric] = {k: _diff(ours[k], theirs[k]) for k in ("mean", "median")}
    ours_seeds = [s["seed"] for s in results["seeds"]]
    if ours_seeds == [s["seed"] for s in baseline["seeds"]]:
        delta["per_seed_test_f1"] = [a["test_f1"] - b["test_f1"]
                                     for a, b in zip(results["seeds"], baseline["seeds"])]
    return delta


def build_results(cfg: RunConfig, graph: Graph, source: str, runs: list[dict],
                  pe_mode: Optional[str] = None) -> dict:
    flat = cfg.to_flat()
    if pe_mode is not None:
        flat["pe_mode"] = pe_mode
    seeds = [{k: r[k] for k in ("seed", "test_f1", "test_auc", "best_epoch", "best_val_f1",
                                "final_train_loss")} for r in runs]
    return {
        "version": RESULTS_VERSION,
        "config": flat,
        "dataset": dict(source=source, **dataset_summary(graph)),
        "metric_average": cfg.train.average_for(graph.n_classes),
        "seeds": seeds,
        "summary": {"n_seeds": len(runs),
                    "test_f1": describe([r["test_f1"] for r in runs]),
                    "test_auc": describe([r["test_auc"] for r in runs])},
        "delta": None,
        "timing": {"per_seed_seconds": [r["seconds"] for r in runs],
                   "total_seconds": sum(r["seconds"] for r in runs)},
    }


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, allow_nan=False) + "\n", encoding="utf-8")
    return path


def _write_run(out_dir: Path, results: dict, runs: list[dict]) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    seed_dir = out_dir / "seeds"
    seed_dir.mkdir(exist_ok=True)
    for r in runs:
        write_json(seed_dir / f"seed_{r['seed']}.json", r["report"])
    return write_json(out_dir / "results.json", results)


# --- commands ---------------------------------------------------------------

def cmd_gen(cfg: RunConfig) -> Path:
    if cfg.synth is None:
        raise ConfigError("gen needs synthetic settings, not dataset=")
    result = generate_with_metadata(cfg.synth)
    out = save_dataset(result, Path(cfg.output_dir))
    s = dataset_summary(result.graph)
    line = f"N={s['n_nodes']} E={s['n_edges']}"
    if "positive_rate" in s:
        line += f" positive_rate={s['positive_rate']:.4f}"
    else:
        line += " class_counts=" + ",".join(map(str, s["class_counts"]))
    print(line)
    return out


def cmd_train(cfg: RunConfig, baseline: Optional[str] = None) -> dict:
    graph, source = load_dataset(cfg)
    runs = run_seeds(graph, cfg)
    results = build_results(cfg, graph, source, runs)
    if baseline is not None:
        path = Path(baseline)
        if not path.is_file():
            raise ConfigError(f"baseline results not found: {path}")
        results["delta"] = compute_delta(results, json.loads(path.read_text(encoding="utf-8")))
    _write_run(Path(cfg.output_dir), results, runs)
    f1 = results["summary"]["test_f1"]
    print(f"pe_mode={cfg.pe_mode} test_f1={f1['mean']:.4f} ± {f1['std']:.4f} over {len(runs)} seed(s)")
    return results


def cmd_ablate(cfg: RunConfig) -> list[dict]:
    """Every positional-encoding mode on the same data and seeds."""
    graph, source = load_dataset(cfg)
    out_dir = Path(cfg.output_dir)
    per_mode = {}
    for mode in PE_MODES:
        runs = run_seeds(graph, cfg, pe_mode=mode)
        results = build_results(cfg, graph, source, runs, pe_mode=mode)
        _write_run(out_dir / mode, results, runs)
        per_mode[mode] = [r["test_f1"] for r in runs]
    base = per_mode["none"]
    rows = []
    for mode in PE_MODES:
        f1 = per_mode[mode]
        stats = describe(f1)
        rows.append({
            "mode": mode, "mean_f1": stats["mean"], "std_f1": stats["std"], "median_f1": stats["median"],
            "delta_f1": stats["mean"] - float(np.mean(base)),
            "median_delta_f1": stats["median"] - float(np.median(base)),
        })
    with open(out_dir / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_HEADER, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    for row in rows:
        print(f"{row['mode']:<11} mean_f1={row['mean_f1']:.4f} median_f1={row['median_f1']:.4f} "
              f"delta_f1={row['delta_f1']:+.4f}")
    return rows


def cmd_bench(n_values, d: int = 16, reps: int = 5, passes=bench.PASSES, mechanisms=bench.MECHANISMS,
              output_dir=".", seed: int = 0, memory_budget_bytes: Optional[int] = None) -> bench.BenchReport:
    def show(row):
        if row.ok:
            print(f"{row.mechanism} {row.pass_:<16} N={row.n:<6} median={row.median_ns / 1e6:9.3f} ms "
                  f"peak_alloc={row.peak_alloc_elems}", flush=True)
        else:
            print(f"{row.mechanism} {row.pass_:<16} N={row.n:<6} {row.status}", flush=True)

    report = bench.run_bench(n_values, d=d, reps=reps, passes=passes, mechanisms=mechanisms,
                             seed=seed, memory_budget_bytes=memory_budget_bytes, log=show)
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "bench.csv")
    report.write_summary(out / "bench_summary.json")
    for mech, per_pass in report.summary()["exponents"].items():
        for p, value in per_pass.items():
            print(f"exponent {mech} {p}: " + ("n/a" if value is None else f"{value:.3f}"))
    return report


# --- argument handling -----------------------------------------------------

def _csv_list(text: str, kind=str) -> list:
    try:
        return [kind(x.strip()) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad list {text!r}: {exc}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gia", description=__doc__.splitlines()[0])
    parser.add_argument("-q", "--quiet", action="store_true", help="only print final summaries")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_args(p):
        p.add_argument("--config", help="file of key=value lines")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--output-dir", help="shorthand for --set output_dir=...")

    run_args(sub.add_parser("gen", help="generate a synthetic dataset"))
    p = sub.add_parser("train", help="train and evaluate over several seeds")
    run_args(p)
    p.add_argument("--baseline", help="results.json to report deltas against")
    run_args(sub.add_parser("ablate", help="compare positional-encoding modes"))

    p = sub.add_parser("bench", help="time conventional vs transpose cross-attention")
    p.add_argument("--n-list", default="2048,4096,8192,16384")
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--passes", default=",".join(bench.PASSES))
    p.add_argument("--mechanisms", default=",".join(bench.MECHANISMS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--memory-budget-mb", type=float, default=None,
                   help="skip CCA sizes needing more (default: half of free RAM)")
    p.add_argument("--output-dir", default=".")
    return parser


def config_from_args(args) -> RunConfig:
    values = load_config_file(args.config) if args.config else {}
    values.update(parse_overrides(args.overrides))
    if args.output_dir:
        values["output_dir"] = args.output_dir
    return RunConfig.from_mapping(values)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        if args.command == "bench":
            budget = None if args.memory_budget_mb is None else int(args.memory_budget_mb * 2 ** 20)
            cmd_bench(_csv_list(args.n_list, int), d=args.d, reps=args.reps,
                      passes=_csv_list(args.passes), mechanisms=_csv_list(args.mechanisms),
                      output_dir=args.output_dir, seed=args.seed, memory_budget_bytes=budget)
            return 0
        cfg = config_from_args(args)
        if args.command == "gen":
            cmd_gen(cfg)
        elif args.command == "train":
            cmd_train(cfg, baseline=args.baseline)
        else:
            cmd_ablate(cfg)
        return 0
    except (GenerationError, TrainingError, MemoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValidationError, ShapeError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
