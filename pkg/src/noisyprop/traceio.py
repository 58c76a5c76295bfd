"""CSV/JSON files for theory and simulation traces.

Both kinds share one layout so that theory and simulation outputs can be
diffed directly:

* CSV: two ``#`` comment lines (tool/version, then ``meta:`` followed by the
  compact JSON metadata), a header row, then one row per layer. Theory traces
  use ``layer,value``; simulated traces ``layer,mean,std,n_runs``.
* JSON: ``{"schema": ..., "meta": {...}, "series": [...]}`` where each series
  carries its columns under ``"columns"``.

Writes go to a temporary file in the target directory followed by
``os.replace``. Non-finite floats are written as ``inf``/``nan`` in CSV and as
``null`` in JSON.
"""

import csv
import io
import json
import math
import os
import sys
import tempfile

import numpy as np

from . import __version__

SCHEMA = "noisyprop.trace/1"


def _clean(obj):
    """JSON-safe copy: numpy scalars/arrays to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def theory_columns(trace) -> dict:
    return {"layer": list(range(len(trace.values))), "value": list(trace.values)}


def empirical_columns(trace) -> dict:
    n = len(trace.mean)
    return {
        "layer": list(range(n)),
        "mean": list(trace.mean),
        "std": list(trace.std),
        "n_runs": [trace.n_runs] * n,
    }


def series(name: str, columns: dict, **attrs) -> dict:
    return {"name": name, **attrs, "columns": columns}


def render_csv(columns: dict, meta: dict) -> str:
    buf = io.StringIO()
    buf.write(f"# noisyprop {__version__} {SCHEMA}\n")
    buf.write("# meta: " + json.dumps(_clean(meta), sort_keys=True, separators=(",", ":")) + "\n")
    names = list(columns)
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(names)
    for row in zip(*(columns[k] for k in names)):
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def render_json(series_list, meta: dict) -> str:
    payload = {"schema": SCHEMA, "version": __version__, "meta": meta, "series": series_list}
    return json.dumps(_clean(payload), sort_keys=True, indent=2) + "\n"


def atomic_write(path, text: str) -> None:
    if path is None or str(path) == "-":
        sys.stdout.write(text)
        return
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_csv(path):
    """Return ``(meta, columns)``; numeric cells come back as floats."""
    meta = {}
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("# meta: "):
            meta = json.loads(line[len("# meta: "):])
        elif not line.startswith("#"):
            body.append(line)
    rows = list(csv.reader(body))
    header, data = rows[0], rows[1:]
    cols = {h: [] for h in header}
    for row in data:
        for h, cell in zip(header, row):
            try:
                cols[h].append(float(cell) if cell != "" else None)
            except ValueError:
                cols[h].append(cell)
    return meta, cols


def read_json(path):
    with open(path) as fh:
        return json.load(fh)
