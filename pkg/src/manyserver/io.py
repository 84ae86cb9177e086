"""Deterministic writers for CSV tables, JSON reports and the binary cache.

CSV schema (version given by ``CSV_SCHEMA_VERSION``), one table per
experiment kind:

``path`` (simulate-queue, simulate-diffusion)
    source, replication, seed, t, X, K, E, D, xhat, then ``zhat_<k>`` and
    ``zhatp_<k>`` for every r-grid node k.  ``D`` is empty for diffusion
    rows; for diffusion rows ``xhat`` equals ``X``.
``stationary``
    source, N, functional, index, value.
``sweep``
    N, functional, n_queue, n_diffusion, ks, ks_se, ks_lo, ks_hi, w1, w1_se,
    w1_lo, w1_hi, mean_delta, var_delta, queue_mean, queue_mean_se.
``verify``
    clause, value, threshold, pass.
``audit``
    replication, seed, t, max_abs, max_rel, max_abs_scaled.

Floats are written with ``repr`` (shortest round-trip form), so files are
byte-identical whenever the numbers are.
"""
from __future__ import annotations

import io
import json
import math
import zipfile
from pathlib import Path

import numpy as np

__all__ = ["CSV_SCHEMA_VERSION", "SCHEMAS", "path_header", "format_value", "write_csv",
           "read_csv", "write_json", "write_npz", "read_npz"]

CSV_SCHEMA_VERSION = "1"

SCHEMAS = {
    "stationary": ["source", "N", "functional", "index", "value"],
    "sweep": ["N", "functional", "n_queue", "n_diffusion", "ks", "ks_se", "ks_lo", "ks_hi", "w1",
              "w1_se", "w1_lo", "w1_hi", "mean_delta", "var_delta", "queue_mean",
              "queue_mean_se"],
    "verify": ["clause", "value", "threshold", "pass"],
    "audit": ["replication", "seed", "t", "max_abs", "max_rel", "max_abs_scaled"],
}


def path_header(n_nodes: int) -> list:
    return (["source", "replication", "seed", "t", "X", "K", "E", "D", "xhat"]
            + [f"zhat_{k}" for k in range(n_nodes)] + [f"zhatp_{k}" for k in range(n_nodes)])


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        f = float(v)
        if math.isnan(f):
            return "nan"
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return repr(f)
    return str(v)


def write_csv(path, header, rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        if len(row) != len(header):
            raise ValueError("row length does not match the header")
        lines.append(",".join(format_value(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_csv(path) -> tuple[list, list]:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    header = text[0].split(",")
    return header, [line.split(",") for line in text[1:]]


def _clean(o):
    if isinstance(o, dict):
        return {str(k): _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, np.ndarray):
        return _clean(o.tolist())
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, (float, np.floating)):
        f = float(o)
        return f if math.isfinite(f) else str(f)
    return o


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n",
                          encoding="utf-8")


def write_npz(path, arrays: dict) -> None:
    """``.npz`` archive with fixed member timestamps (byte-reproducible)."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())


def read_npz(path) -> dict:
    with np.load(path, allow_pickle=False) as data:
        return {k: data[k] for k in data.files}
