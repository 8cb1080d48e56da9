"""tabular outputs: CSV/Parquet writers, duckdb readers and markdown summaries"""

from pathlib import Path
from typing import Any, Sequence
import math

import duckdb
import numpy as np
import pandas as pd
import pyarrow as pa
import pyarrow.parquet as pq
from numpy.typing import NDArray
from loguru import logger

from core import belief_entropy
from schemas import DataError

FLOAT_FORMAT = "%.17g"
# file and table layer failures, reported as DataError by the pipeline
IO_ERRORS = (OSError, pa.ArrowException, duckdb.Error)


def write_csv(df: pd.DataFrame, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.debug(f"Wrote {len(df)} rows to {path}")
    return path


def summarize_bench(runs: pd.DataFrame) -> pd.DataFrame:
    """per (L, K) mean and population std of accuracy over repetitions"""
    con = duckdb.connect()
    try:
        con.register("runs", runs)
        return con.execute(
            """
            SELECT L, K,
                   avg(accuracy) AS mean_accuracy,
                   coalesce(stddev_pop(accuracy), 0.0) AS std_accuracy,
                   count(*) AS repetitions
            FROM runs
            GROUP BY L, K
            ORDER BY L, K
            """
        ).df()
    finally:
        con.close()


def feature_columns(width: int) -> list[str]:
    return ["label"] + [f"f{i}" for i in range(width)]


def write_features(
    path: Path,
    labels: Sequence[int],
    features: NDArray[np.float64],
    fmt: str = "parquet",
    metadata: dict[str, Any] | None = None,
) -> Path:
    """
    one row per image, label first; order preserved

    `metadata` goes into the Parquet schema metadata; CSV files rely on the
    run_meta.json written next to them
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    width = features.shape[1] if features.ndim == 2 else 0
    if fmt == "csv":
        df = pd.DataFrame(features, columns=feature_columns(width)[1:])
        df.insert(0, "label", labels)
        return write_csv(df, path)
    flat = pa.array(features.ravel(), type=pa.float64())
    table = pa.table(
        {
            "label": pa.array(labels, type=pa.int64()),
            "features": pa.FixedSizeListArray.from_arrays(flat, width),
        }
    )
    if metadata:
        table = table.replace_schema_metadata({k: str(v) for k, v in metadata.items()})
    pq.write_table(table, path)
    logger.debug(f"Wrote {len(labels)} feature rows of width {width} to {path}")
    return path


def read_features(path: Path) -> tuple[NDArray[np.int64], NDArray[np.float64]]:
    path = Path(path)
    if not path.exists():
        raise DataError("features", f"feature file not found: {path}")
    suffix = path.suffix.lower()
    if suffix == ".parquet":
        table = duckdb.read_parquet(str(path)).to_arrow_table()
        labels = table.column("label").to_numpy()
        column = table.column("features").combine_chunks()
        values = column.flatten().to_numpy(zero_copy_only=False)
        if len(labels):
            width = len(values) // len(labels)
        else:
            width = getattr(column.type, "list_size", 0)
        return labels.astype(np.int64), values.reshape(len(labels), width)
    if suffix == ".csv":
        # all_varchar: type sniffing only samples the head of the file
        df = duckdb.read_csv(str(path), header=True, all_varchar=True).df()
        width = len(df.columns) - 1
        if df.empty:
            return np.zeros(0, dtype=np.int64), np.zeros((0, width))
        values = df.to_numpy().astype(np.float64)
        return values[:, 0].astype(np.int64), values[:, 1:]
    raise DataError("features", f"unsupported feature file extension {path.suffix}")


def read_feature_metadata(path: Path) -> dict[str, str]:
    """schema metadata of a Parquet feature file, without the arrow schema entry"""
    raw = pq.read_schema(str(path)).metadata or {}
    return {
        k.decode("utf-8"): v.decode("utf-8")
        for k, v in raw.items()
        if not k.startswith(b"ARROW:")
    }


def render_table(headers: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    """markdown table"""
    table = "| " + " | ".join(headers) + " |\n"
    table += "|-" + "-|-".join(["-"] * len(headers)) + "-|\n"
    for row in rows:
        table += "| " + " | ".join(_format_cell(v) for v in row) + " |\n"
    return table


def _format_cell(value: Any) -> str:
    if value is None:
        return "None"
    if isinstance(value, float):
        if math.isnan(value):
            return "NaN"
        return f"{value:.4g}"
    return str(value).replace("|", "\\|")


def _histogram(values: NDArray[np.float64], bins: int = 5) -> str:
    counts, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    return " ".join(f"[{lo:.1f},{hi:.1f}]:{n}" for lo, hi, n in zip(edges, edges[1:], counts))


def describe_nodes(title: str, layers: Sequence[tuple[str, Sequence[Any]]]) -> str:
    """
    markdown summary of node snapshots grouped per layer: shapes, K, starvation
    histogram and entropy of each node's stored belief
    """
    h = f"### {title}\n{'-' * 50}\n"
    rows = []
    for name, nodes in layers:
        starvation = np.concatenate([np.asarray(n.starvation) for n in nodes])
        entropy = np.array([belief_entropy(n.prev_belief) for n in nodes])
        cfg = nodes[0].config
        seeded = sum(n.init_counter for n in nodes)
        rows.append(
            [
                name,
                len(nodes),
                cfg.K,
                cfg.D,
                f"{seeded}/{cfg.K * len(nodes)}",
                float(starvation.min()),
                float(starvation.max()),
                _histogram(starvation),
                float(entropy.mean()),
                float(entropy.max()),
            ]
        )
    headers = [
        "Layer",
        "Nodes",
        "K",
        "D",
        "Seeded",
        "Starvation min",
        "Starvation max",
        "Starvation histogram",
        "Belief entropy mean",
        "Belief entropy max",
    ]
    return h + render_table(headers, rows)
