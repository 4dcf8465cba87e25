"""
fedforest command line.

    python src/cli.py gen-data  --config configs/homogeneous.env --out data/
    python src/cli.py train     --config run.env --data data/ --model-out model.json
    python src/cli.py predict   --model model.json --data data/test.csv --out predictions.csv
    python src/cli.py evaluate  --model model.json --data data/test.csv
    python src/cli.py benchmark --config configs/ranking_disagreement.env --out results/
    python src/cli.py diagnose  --config run.env --data data/
    python src/cli.py serve     --port 8000

Every run-config key has a matching flag (``--max-depth 6``); a flag beats the config
file, which beats the built-in default. Exit codes: 0 success, 2 configuration error,
3 data error, 4 protocol inconsistency.
"""
import argparse
import json
import logging
import os
import platform
import sys
import time
from importlib import metadata
from pathlib import Path
from typing import Dict, List, Optional, Sequence

# Ensure src/ is on the path when running from different directories
sys.path.insert(0, os.path.dirname(__file__))

import numpy as np
import pandas as pd
from pydantic import ValidationError

from benchmark import method_means, metric_name, run_benchmark, score, write_tables
from dataset_io import (
    FLOAT_FORMAT,
    infer_task,
    load_rows,
    load_shards,
    normalize_key,
    read_run_config,
    write_json,
    write_shards,
)
from diagnostics import diagnose
from errors import (
    ConfigError,
    DataError,
    EmptyNodeError,
    ProtocolInconsistencyError,
    TaskMismatchError,
)
from forest import Forest, fit
from models import RunConfig
from synthdata import GroundTruthF, generate, ground_truth_for, resolve

logger = logging.getLogger("fedforest.cli")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_PROTOCOL = 4

VERSIONED_PACKAGES = ["numpy", "scipy", "pandas", "scikit-learn", "joblib", "pydantic"]


# ─── Config ──────────────────────────────────────────────────────────────────

def package_versions() -> Dict[str, str]:
    versions = {"python": platform.python_version()}
    for name in VERSIONED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


def _flag(field: str) -> str:
    return "--" + field.replace("_", "-")


def add_run_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("run config keys")
    for field, info in RunConfig.model_fields.items():
        default = info.get_default(call_default_factory=True)
        group.add_argument(
            _flag(field), dest=f"cfg_{field}", default=None, metavar="VALUE",
            help=f"default: {default}",
        )


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """flag > config file > default"""
    values: Dict[str, str] = {}
    if args.config:
        values.update(read_run_config(args.config))
    for key, value in vars(args).items():
        if key.startswith("cfg_") and value is not None:
            values[normalize_key(key[4:])] = value
    return RunConfig.model_validate(values)


# ─── Subcommands ─────────────────────────────────────────────────────────────

def cmd_gen_data(args, run: RunConfig) -> int:
    scenario = run.scenario_config()
    f = ground_truth_for(scenario)
    shards, held_out = generate(scenario, f)
    out = Path(args.out)
    written = write_shards(out, shards, held_out.X, held_out.y, held_out.sites)
    resolved = resolve(scenario)
    write_json(out / "scenario.json", {
        **scenario.model_dump(mode="json"),
        "resolved": {"gamma": resolved.gamma, "alphas": resolved.alphas, "delta": resolved.delta},
    })
    if isinstance(f, GroundTruthF):
        f.tree.save(out / "ground_truth.json")
    else:
        write_json(out / "ground_truth.json", {"function": f.__name__})
    print(f"wrote {len(shards)} client files and {held_out.n_rows} test rows to {out}")
    logger.debug("files: %s", [str(p) for p in written])
    return EXIT_OK


def cmd_train(args, run: RunConfig) -> int:
    shards, site_map = load_shards(args.data, run.task)
    task = infer_task(run.task, shards)
    config = run.forest_config(task=task)
    started = time.perf_counter()
    forest = fit(shards, config)
    forest.site_map = site_map
    wall = time.perf_counter() - started

    model_out = Path(args.model_out)
    model_out.parent.mkdir(parents=True, exist_ok=True)
    forest.save(model_out)

    X = np.vstack([s.features for s in shards])
    y = np.concatenate([s.outcomes for s in shards])
    sites = np.concatenate([np.full(s.n_rows, s.client_id) for s in shards])
    ledger = forest.ledger
    metrics = {
        "config": config.model_dump(mode="json"),
        "run_config": run.model_dump(mode="json"),
        "seed": config.seed,
        "versions": package_versions(),
        "wall_time_seconds": wall,
        "site_map": {str(k): v for k, v in site_map.items()},
        "ledger": {"scalars_up": ledger.scalars_up, "scalars_down": ledger.scalars_down},
        "per_phase": ledger.per_phase,
        "rounds": ledger.rounds,
        "nodes": forest.comm_ledger.node_table() if forest.comm_ledger is not None else [],
        "training_error": {"metric_name": metric_name(task), "metric": score(task, y, forest.predict(X, sites))},
    }
    metrics_out = Path(args.metrics_out) if args.metrics_out else model_out.with_name("metrics.json")
    write_json(metrics_out, metrics)
    print(
        f"trained {len(forest.trees)} trees in {wall:.2f}s: {ledger.rounds} rounds, "
        f"{ledger.scalars_up} scalars up; model -> {model_out}"
    )
    return EXIT_OK


def _read_for_model(forest: Forest, path: str):
    """(X, y, client ids as written, site indices of the model)"""
    kind = "regression" if forest.task.is_regression else "classification"
    X, y, raw_sites = load_rows(path, task=kind)
    return X, y, raw_sites, forest.site_indices(raw_sites)


def cmd_predict(args, run: RunConfig) -> int:
    forest = Forest.load(args.model)
    X, _, raw_sites, sites = _read_for_model(forest, args.data)
    predictions = forest.predict(X, sites, site_fallback=not args.no_site_fallback)
    frame = pd.DataFrame({"client_id": raw_sites, "prediction": predictions})
    if not forest.task.is_regression:
        frame["prediction"] = frame["prediction"].astype(np.int64)
    frame.to_csv(args.out, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    print(f"wrote {len(frame)} predictions to {args.out}")
    return EXIT_OK


def cmd_evaluate(args, run: RunConfig) -> int:
    forest = Forest.load(args.model)
    X, y, _, sites = _read_for_model(forest, args.data)
    predictions = forest.predict(X, sites, site_fallback=not args.no_site_fallback)
    result = {
        "metric_name": metric_name(forest.task),
        "metric": score(forest.task, y, predictions),
        "rows": int(X.shape[0]),
    }
    if args.out:
        write_json(args.out, result)
    print(f"{result['metric_name']} = {result['metric']:.6g} on {result['rows']} rows")
    return EXIT_OK


def cmd_benchmark(args, run: RunConfig) -> int:
    sweep = run.benchmark_config()
    out = Path(args.out)
    results = run_benchmark(run, sweep)
    results_path, summary_path = write_tables(results, out)
    write_json(out / "config.json", {
        "run_config": run.model_dump(mode="json"),
        "sweep": sweep.model_dump(mode="json"),
        "versions": package_versions(),
    })
    for (method, gamma), mean in sorted(method_means(results).items()):
        print(f"  {method:<24} gamma={gamma:<6g} {results['metric_name'].iloc[0]}={mean:.4f}")
    failed = int((results["error"] != "").sum())
    print(f"{len(results)} rows ({failed} failed) -> {results_path}, {summary_path}")
    return EXIT_OK


def cmd_diagnose(args, run: RunConfig) -> int:
    shards, _ = load_shards(args.data, run.task)
    task = infer_task(run.task, shards)
    config = run.forest_config(task=task)
    report = diagnose(
        shards,
        config,
        site_trees=run.site_trees,
        site_depth=run.site_depth,
        validation_fraction=run.validation_fraction,
        repeats=run.diagnostic_repeats,
        auc_threshold=run.auc_threshold,
    )
    document = report.model_dump(mode="json")
    if args.out:
        write_json(args.out, document)
    print(json.dumps(document, indent=2))
    return EXIT_OK


def cmd_serve(args, run: RunConfig) -> int:
    from main import serve
    serve(host=args.host, port=args.port, log_level=args.log_level.lower())
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "benchmark": cmd_benchmark,
    "diagnose": cmd_diagnose,
    "serve": cmd_serve,
}


# ─── Parser ──────────────────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="KEY=VALUE run-config file")
    common.add_argument(
        "--log-level", default=os.getenv("FEDFOREST_LOG_LEVEL", "INFO"),
        choices=["DEBUG", "INFO", "WARNING", "ERROR"], type=str.upper,
    )
    add_run_flags(common)

    parser = argparse.ArgumentParser(prog="fedforest", description="Federated random forests")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic federated dataset")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common], help="train through the federated protocol")
    p.add_argument("--data", required=True, help="directory of client_*.csv files")
    p.add_argument("--model-out", required=True)
    p.add_argument("--metrics-out", default=None, help="default: metrics.json next to the model")

    for name in ("predict", "evaluate"):
        p = sub.add_parser(name, parents=[common], help=f"{name} a dataset file with a saved model")
        p.add_argument("--model", required=True)
        p.add_argument("--data", required=True, help="dataset file")
        p.add_argument("--out", required=name == "predict", default=None)
        p.add_argument("--no-site-fallback", action="store_true",
                       help="fail instead of following the larger child when a site is unknown")

    p = sub.add_parser("benchmark", parents=[common], help="run a method x seed sweep")
    p.add_argument("--out", required=True)

    p = sub.add_parser("diagnose", parents=[common], help="heterogeneity diagnostics")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)

    p = sub.add_parser("serve", parents=[common], help="start the model service")
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=None)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        run = load_run_config(args)
        return COMMANDS[args.command](args, run)
    except (ConfigError, ValidationError) as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except ProtocolInconsistencyError as exc:
        logger.error("protocol inconsistency: %s", exc)
        return EXIT_PROTOCOL
    except (DataError, TaskMismatchError, EmptyNodeError, ValueError) as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
