import csv
import json
import sys
from contextlib import contextmanager

import numpy as np

PREDICT_FIELDS = ["input_index", "prediction", "score", "score_kind", "quantifier"]
EVALUATE_FIELDS = ["quantifier", "accuracy", "auroc", "num_inputs", "num_wrong"]
BENCH_FIELDS = [
    "num_processes",
    "context",
    "wall_clock_seconds",
    "reduction_percent",
    "peak_concurrent_models",
    "per_slot_occupancy",
]


@contextmanager
def open_output(output):
    if output in (None, "-"):
        yield sys.stdout
        return
    with open(output, "w", newline="", encoding="utf-8") as handle:
        yield handle


def _plain(value):
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _csv_cell(value):
    value = _plain(value)
    if isinstance(value, (list, dict)):
        return json.dumps(value)
    if value is None:
        return "n/a"
    return value


def write_report(rows, fieldnames, output=None, fmt="csv"):
    """
    CSV with CRLF row endings and minimal quoting, or one JSON array of objects.
    """
    with open_output(output) as handle:
        if fmt == "json":
            json.dump([{key: _plain(row[key]) for key in fieldnames} for row in rows], handle, indent=2)
            handle.write("\n")
            return
        writer = csv.DictWriter(handle, fieldnames=fieldnames, lineterminator="\r\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({key: _csv_cell(row[key]) for key in fieldnames})


def predict_rows(results, aliases):
    """
    Input-major, quantifier-minor.
    """
    rows = []
    num_inputs = len(results[0]) if results else 0
    for index in range(num_inputs):
        for alias, result in zip(aliases, results):
            rows.append({
                "input_index": index,
                "prediction": result.predictions[index],
                "score": float(result.scores[index]),
                "score_kind": result.score_kind.value,
                "quantifier": alias,
            })
    return rows


def write_lines(lines, output=None):
    with open_output(output) as handle:
        for line in lines:
            handle.write(f"{line}\n")
