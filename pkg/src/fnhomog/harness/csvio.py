"""CSV output with fixed headers and 17-significant-digit floats."""

from __future__ import annotations

import csv
import json
from importlib import resources
from pathlib import Path

import numpy as np

__all__ = ["load_schema", "fmt", "write_csv", "read_csv"]


def load_schema():
    text = resources.files("fnhomog.harness").joinpath("csv_schema.json").read_text()
    return json.loads(text)


def fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if v is None:
        return ""
    return str(v)


def write_csv(path, name, rows):
    """Write ``rows`` (dicts) under the documented header of table ``name``."""
    schema = load_schema()
    if name not in schema:
        raise KeyError(f"no schema for table {name!r}")
    header = schema[name]["columns"]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            extra = set(r) - set(header)
            if extra:
                raise KeyError(f"columns {sorted(extra)} are not in the {name} schema")
            w.writerow([fmt(r.get(c)) for c in header])
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
