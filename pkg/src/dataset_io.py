"""
Dataset and run-config files.

Datasets are delimited text with a header ``client_id,x0,...,x{d-1},y`` and one row per
sample; floats are written with 17 significant digits so a parse/re-emit cycle is
byte-identical. Run configs are KEY=VALUE files (keys case-insensitive, dashes and
underscores interchangeable).
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from dotenv import dotenv_values

from client import ClientShard
from errors import ConfigError, DataError, TaskMismatchError
from models import TaskKind

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
TEST_FILE = "test.csv"
SHARD_GLOB = "client_*.csv"

PathLike = Union[str, Path]


# ─── Run config ──────────────────────────────────────────────────────────────

def normalize_key(key: str) -> str:
    return key.strip().lower().replace("-", "_")


def read_run_config(path: PathLike) -> Dict[str, str]:
    """KEY=VALUE pairs with normalized keys; empty values are dropped"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"run config not found: {path}")
    out: Dict[str, str] = {}
    for key, value in dotenv_values(path).items():
        if value is None or value.strip() == "":
            continue
        name = normalize_key(key)
        if name in out:
            raise ConfigError(f"key '{name}' given twice in {path}")
        out[name] = value.strip()
    return out


# ─── Datasets ────────────────────────────────────────────────────────────────

def feature_columns(d: int) -> List[str]:
    return [f"x{j}" for j in range(d)]


def to_frame(X: np.ndarray, y: np.ndarray, sites: np.ndarray) -> pd.DataFrame:
    X = np.asarray(X, dtype=np.float64)
    frame = pd.DataFrame(X, columns=feature_columns(X.shape[1]))
    frame.insert(0, "client_id", np.asarray(sites, dtype=np.int64))
    frame["y"] = np.asarray(y)
    return frame


def write_frame(frame: pd.DataFrame, path: PathLike) -> None:
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def write_dataset(path: PathLike, X, y, sites) -> None:
    write_frame(to_frame(X, y, sites), path)


def _parse_column(raw: pd.Series, name: str, path: Path, integer: bool) -> np.ndarray:
    blank = raw.str.strip() == ""
    if blank.any():
        row = int(np.argmax(blank.to_numpy()))
        raise DataError("missing value", path=str(path), row=row + 2, column=name)
    values = pd.to_numeric(raw, errors="coerce")
    bad = values.isna() | ~np.isfinite(values.to_numpy(dtype=np.float64, na_value=np.nan))
    if bad.any():
        row = int(np.argmax(bad.to_numpy()))
        raise DataError(f"cannot parse '{raw.iloc[row]}' as a number", path=str(path), row=row + 2, column=name)
    arr = values.to_numpy(dtype=np.float64)
    if integer:
        fractional = (arr != np.round(arr)) | (arr < 0)
        if fractional.any():
            row = int(np.argmax(fractional))
            raise DataError(
                f"expected a non-negative integer, got '{raw.iloc[row]}'", path=str(path), row=row + 2, column=name
            )
        return arr.astype(np.int64)
    return arr


def read_dataset(path: PathLike, task: str = "regression") -> pd.DataFrame:
    """Parse and validate one dataset file; row numbers in errors are file line numbers"""
    path = Path(path)
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError as exc:
        raise DataError("dataset file not found", path=str(path)) from exc
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"unreadable dataset: {exc}", path=str(path)) from exc

    columns = [c.strip() for c in raw.columns]
    if len(columns) < 3 or columns[0] != "client_id" or columns[-1] != "y":
        raise DataError("header must be client_id,x0,...,y", path=str(path), row=1)
    expected = feature_columns(len(columns) - 2)
    if columns[1:-1] != expected:
        raise DataError(f"feature columns must be named {expected[0]}..{expected[-1]}", path=str(path), row=1)
    raw.columns = columns

    frame = pd.DataFrame({"client_id": _parse_column(raw["client_id"], "client_id", path, integer=True)})
    for name in expected:
        frame[name] = _parse_column(raw[name], name, path, integer=False)
    frame["y"] = _parse_column(raw["y"], "y", path, integer=task == "classification")
    return frame


def frame_arrays(frame: pd.DataFrame) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    d = frame.shape[1] - 2
    return (
        frame[feature_columns(d)].to_numpy(dtype=np.float64),
        frame["y"].to_numpy(),
        frame["client_id"].to_numpy(dtype=np.int64),
    )


# ─── Shard directories ───────────────────────────────────────────────────────

def shard_files(data_dir: PathLike) -> List[Path]:
    data_dir = Path(data_dir)
    files = sorted(data_dir.glob(SHARD_GLOB))
    if not files:
        raise DataError(f"no {SHARD_GLOB} files", path=str(data_dir))
    return files


def write_shards(out_dir: PathLike, shards: Sequence[ClientShard], X_test, y_test, test_sites) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for shard in sorted(shards, key=lambda s: s.client_id):
        path = out_dir / f"client_{shard.client_id}.csv"
        write_dataset(path, shard.features, shard.outcomes, np.full(shard.n_rows, shard.client_id))
        written.append(path)
    test_path = out_dir / TEST_FILE
    write_dataset(test_path, X_test, y_test, test_sites)
    written.append(test_path)
    return written


def load_shards(data_dir: PathLike, task: str = "regression") -> Tuple[List[ClientShard], Dict[int, int]]:
    """All client files of a directory as shards with ids mapped onto 0..K-1"""
    frames = [read_dataset(p, task) for p in shard_files(data_dir)]
    widths = {f.shape[1] for f in frames}
    if len(widths) != 1:
        raise DataError("client files disagree on the number of features", path=str(data_dir))
    frame = pd.concat(frames, ignore_index=True)
    X, y, raw_sites = frame_arrays(frame)
    site_map = {int(s): k for k, s in enumerate(np.unique(raw_sites))}
    sites = np.array([site_map[int(s)] for s in raw_sites], dtype=np.int64)
    shards = [ClientShard(k, X[sites == k], y[sites == k]) for k in range(len(site_map))]
    logger.info("loaded %d clients, %d rows, %d features from %s", len(shards), X.shape[0], X.shape[1], data_dir)
    return shards, site_map


def load_rows(path: PathLike, task: str = "regression") -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(X, y, client ids) of a file, ids exactly as written"""
    return frame_arrays(read_dataset(path, task))


def infer_task(kind: str, shards: Sequence[ClientShard]) -> TaskKind:
    if kind == "regression":
        return TaskKind.regression()
    labels = np.concatenate([s.outcomes for s in shards])
    if labels.size == 0 or np.any(labels < 0) or np.any(labels != np.round(labels)):
        raise TaskMismatchError("classification needs non-negative integer labels")
    return TaskKind.classification(max(2, int(labels.max()) + 1))


def write_json(path: PathLike, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
