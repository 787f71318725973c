"""CSV and JSON report emission.

CSV files print floats with four decimals; the JSON twin keeps full
precision. Both are byte-stable for identical inputs.
"""

import csv
import io
import json
from pathlib import Path

from .errors import ContractError
from .evaluation import ARM_ORDER, EvalArm
from .io import atomic_write

RESULT_COLUMNS = [
    "subset", "subset_mask", "arm", "kind",
    "accuracy", "macro_f1", "mean_per_class_accuracy",
    "learnable", "ratio",
]
COSSIM_COLUMNS = ["subset", "subset_mask", "kind", "class", "pretrained", "adapted", "count"]
PARAM_COLUMNS = ["subset", "subset_mask", "kind", "learnable", "total", "ratio"]

# mIoU has no meaning for the classification task; accuracy and macro-F1 stand in for it
NOTE = "metrics: accuracy, macro-F1 and mean per-class accuracy (mIoU not applicable)"

_KIND_ORDER = ["none", "scale_shift", "scale_only", "shift_only", "bitfit", "lora", "norm_tune"]


def _kind_key(kind):
    return _KIND_ORDER.index(kind) if kind in _KIND_ORDER else len(_KIND_ORDER)


def sort_results(rows):
    """Order rows by (subset bitmask, arm, kind)."""
    return sorted(
        rows,
        key=lambda r: (int(r["subset_mask"]), ARM_ORDER[EvalArm.parse(r["arm"])], _kind_key(r["kind"]), r["kind"]),
    )


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def to_csv(rows, columns):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def to_json(rows, columns, note=NOTE):
    doc = {"note": note, "columns": columns, "rows": [{c: row.get(c) for c in columns} for row in rows]}
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def emit_report(rows, out_prefix, columns=RESULT_COLUMNS, sort=True):
    """Write ``<prefix>.csv`` and ``<prefix>.json``; returns both paths."""
    rows = list(rows)
    if not rows:
        raise ContractError("cannot emit a report with no rows")
    if sort and "arm" in columns:
        rows = sort_results(rows)
    elif sort:
        rows = sorted(rows, key=lambda r: tuple(
            (_kind_key(r[c]) if c == "kind" else r[c]) for c in columns if c in ("subset_mask", "kind", "class")
        ))
    out_prefix = Path(out_prefix)
    csv_path = atomic_write(out_prefix.with_suffix(".csv"), to_csv(rows, columns))
    json_path = atomic_write(out_prefix.with_suffix(".json"), to_json(rows, columns))
    return csv_path, json_path


def load_rows(path):
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return doc["columns"], doc["rows"]


def format_table(rows, columns):
    """Plain fixed-width table for terminal output."""
    cells = [[_fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)
