"""
Benchmark sweeps: every method on every (gamma, delta, seed) cell of one scenario.

Cells are independent and deterministic, so they fan out to joblib worker processes and
the tables come out byte-identical whatever the schedule. A method that fails records its
error in its row; the sweep carries on.
"""
import logging
import math
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from sklearn.metrics import accuracy_score, mean_squared_error

from baselines import fit_centralized, fit_fed_histogram, fit_local, fit_local_ensemble, pool_shards
from dataset_io import FLOAT_FORMAT
from errors import FedForestError
from forest import fit
from models import BenchmarkConfig, ForestConfig, RunConfig, TaskKind
from synthdata import generate, resolve

logger = logging.getLogger(__name__)

RESULT_COLUMNS = [
    "method", "scenario", "gamma", "delta", "seed",
    "metric_name", "metric", "comm_scalars", "rounds", "error",
]
SORT_KEYS = ["scenario", "gamma", "delta", "method", "seed"]


# ─── Metrics ─────────────────────────────────────────────────────────────────

def metric_name(task: TaskKind) -> str:
    return "mse" if task.is_regression else "accuracy"


def score(task: TaskKind, y_true, y_pred) -> float:
    if task.is_regression:
        return float(mean_squared_error(y_true, y_pred))
    return float(accuracy_score(np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)))


# ─── Methods ─────────────────────────────────────────────────────────────────

def _federated(mode: str, include_h: bool) -> Callable:
    def run(shards, config: ForestConfig):
        cfg = ForestConfig.model_validate({
            **config.model_dump(), "mode": mode, "candidate_rule": "quantile", "include_h": include_h,
        })
        return fit(shards, cfg, method=f"fedforest_{'quantiles' if mode == 'exact_quantiles' else 'avgimp'}")
    return run


def _centralized(include_h: bool) -> Callable:
    def run(shards, config: ForestConfig):
        X, y, sites = pool_shards(shards)
        cfg = config.model_copy(update={"include_h": include_h})
        return fit_centralized(X, y, sites, cfg, rule="midpoint", method="centralized_rf")
    return run


METHOD_FITTERS: Dict[str, Callable] = {
    "fedforest_quantiles_x": _federated("exact_quantiles", False),
    "fedforest_quantiles_xh": _federated("exact_quantiles", True),
    "fedforest_avgimp_x": _federated("avgimp_topl", False),
    "fedforest_avgimp_xh": _federated("avgimp_topl", True),
    "fed_histogram": lambda shards, config: fit_fed_histogram(shards, config),
    "local_learning": lambda shards, config: fit_local(shards, config),
    "local_ensemble": lambda shards, config: fit_local_ensemble(shards, config),
    "centralized_x": _centralized(False),
    "centralized_xh": _centralized(True),
}


# ─── Cells ───────────────────────────────────────────────────────────────────

def run_cell(run: RunConfig, method: str, gamma: Optional[float], delta: Optional[float], seed: int) -> dict:
    """One table row; exceptions from the method land in the error column"""
    scenario = run.scenario_config(gamma=gamma, delta=delta, seed=seed)
    resolved = resolve(scenario)
    row = {
        "method": method,
        "scenario": scenario.scenario,
        "gamma": float(resolved.gamma),
        "delta": float(resolved.delta),
        "seed": int(seed),
        "metric_name": "mse" if scenario.task == "regression" else "accuracy",
        "metric": math.nan,
        "comm_scalars": 0,
        "rounds": 0,
        "error": "",
    }
    try:
        shards, held_out = generate(scenario)
        task = TaskKind.regression() if scenario.task == "regression" else TaskKind.classification(2)
        config = run.forest_config(task=task, seed=seed)
        model = METHOD_FITTERS[method](shards, config)
        row["metric"] = score(task, held_out.y, model.predict(held_out.X, held_out.sites))
        ledger = getattr(model, "ledger", None)
        if ledger is not None:
            row["comm_scalars"] = int(ledger.scalars_up)
            row["rounds"] = int(ledger.rounds)
    except (FedForestError, ValueError, ArithmeticError) as exc:
        logger.warning("%s failed on %s gamma=%s seed=%s: %s", method, scenario.scenario, gamma, seed, exc)
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def run_benchmark(run: RunConfig, sweep: Optional[BenchmarkConfig] = None) -> pd.DataFrame:
    sweep = sweep or run.benchmark_config()
    cells = list(sweep.cells())
    logger.info("benchmark %s: %d cells on %d jobs", sweep.scenario, len(cells), sweep.n_jobs)
    base = run.model_copy(update={"scenario": sweep.scenario})
    if sweep.n_jobs == 1:
        rows = [run_cell(base, m, g, d, s) for g, d, s, m in cells]
    else:
        rows = Parallel(n_jobs=sweep.n_jobs)(delayed(run_cell)(base, m, g, d, s) for g, d, s, m in cells)
    table = pd.DataFrame(rows, columns=RESULT_COLUMNS)
    return table.sort_values(SORT_KEYS, kind="mergesort").reset_index(drop=True)


def summarize(results: pd.DataFrame) -> pd.DataFrame:
    """Mean and sample standard deviation per (method, scenario, gamma, delta)"""
    ok = results[results["error"] == ""]
    keys = ["method", "scenario", "gamma", "delta", "metric_name"]
    summary = (
        ok.groupby(keys, sort=True)
        .agg(
            n=("metric", "size"),
            mean=("metric", "mean"),
            sd=("metric", "std"),
            comm_scalars=("comm_scalars", "mean"),
            rounds=("rounds", "mean"),
        )
        .reset_index()
    )
    failed = results[results["error"] != ""].groupby(keys, sort=True).size().rename("failed").reset_index()
    summary = summary.merge(failed, on=keys, how="outer")
    summary["n"] = summary["n"].fillna(0).astype(np.int64)
    summary["failed"] = summary["failed"].fillna(0).astype(np.int64)
    return summary.sort_values(["scenario", "gamma", "delta", "method"], kind="mergesort").reset_index(drop=True)


def write_tables(results: pd.DataFrame, out_dir) -> Tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results_path = out_dir / "results.csv"
    summary_path = out_dir / "summary.csv"
    results.to_csv(results_path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    summarize(results).to_csv(summary_path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return results_path, summary_path


def method_means(results: pd.DataFrame) -> Dict[Tuple[str, float], float]:
    """(method, gamma) -> mean metric, for quick assertions and status lines"""
    ok = results[results["error"] == ""]
    grouped = ok.groupby(["method", "gamma"])["metric"].mean()
    return {(m, float(g)): float(v) for (m, g), v in grouped.items()}


def failures(results: pd.DataFrame) -> List[str]:
    return [f"{r.method} seed={r.seed}: {r.error}" for r in results.itertuples() if r.error]
