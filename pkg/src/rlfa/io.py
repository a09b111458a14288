"""CSV and JSON writers with stable, diffable output.

Every CSV starts with one ``#`` comment row of ``key=value`` pairs (schema
version, seed) followed by the column header. Floats are written with
``repr`` so files round-trip exactly and repeated runs are byte-identical.
"""

import csv
import io
import json
from pathlib import Path

import numpy as np

SCHEMAS = {
    "trajectory": ("rlfa.trajectory/v1", ["episode", "h", "s", "a", "r", "s_next"]),
    "query": ("rlfa.query/v1", ["query", "h", "s", "a", "r", "s_next"]),
    "regret": ("rlfa.regret/v1", ["k", "instant_regret", "cumulative"]),
    "learning": ("rlfa.learning/v1", ["iteration", "J"]),
    "spectrum": ("rlfa.spectrum/v1", ["index", "eigenvalue", "cumulative_tail"]),
    "response": ("rlfa.response/v1", ["epsilon", "nu_id", "rho_id", "response", "dual_gap"]),
}


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return str(v)


def csv_text(columns, rows, meta=None):
    buf = io.StringIO()
    if meta:
        buf.write("# " + " ".join(f"{k}={_fmt(v)}" for k, v in meta.items()) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, columns, rows, meta=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(columns, rows, meta))
    return path


def write_schema_csv(path, schema, rows, **meta):
    version, columns = SCHEMAS[schema]
    return write_csv(path, columns, rows, {"schema": version, **meta})


def read_csv(path):
    """Return ``(meta, header, rows)``; rows are lists of strings."""
    lines = Path(path).read_text().splitlines()
    meta = {}
    if lines and lines[0].startswith("#"):
        for tok in lines[0][1:].split():
            k, _, v = tok.partition("=")
            meta[k] = v
        lines = lines[1:]
    reader = list(csv.reader(lines))
    return meta, reader[0], reader[1:]


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def write_json(path, doc):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_jsonable(doc), indent=2, sort_keys=True) + "\n")
    return path
