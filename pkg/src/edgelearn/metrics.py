"""Metrics records and their csv / json-lines serialisation.

Reals are written with 17 significant digits so that parsing a file and
writing it back reproduces it byte for byte.
"""
from __future__ import annotations

import csv
import io
import json
import math
from typing import IO, Iterable, Sequence

import numpy as np


def format_value(v) -> str:
    """Text form of one cell; floats use ``.17g``."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return format(v, ".17g")
    if v is None:
        return ""
    return str(v)


def parse_value(text: str):
    """Inverse of :func:`format_value` for cells read back from csv."""
    if text in ("true", "false"):
        return text == "true"
    if text in ("nan", "inf", "-inf"):
        return float(text)
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def _json_value(v) -> str:
    if isinstance(v, (float, np.floating)) and not isinstance(v, bool):
        v = float(v)
        return format(v, ".17g") if math.isfinite(v) else "null"
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return json.dumps(v)


class MetricsWriter:
    """Append-only single writer bound to a fixed column list.

    Rows are flushed as they arrive so a failing run still leaves every
    completed record on disk.
    """

    def __init__(self, stream: IO[str], columns: Sequence[str], fmt: str = "csv"):
        if fmt not in ("csv", "jsonl"):
            raise ValueError(f"unknown metrics format {fmt!r}")
        self.columns = list(columns)
        self.fmt = fmt
        self.stream = stream
        self.count = 0
        if fmt == "csv":
            self._csv = csv.writer(stream, lineterminator="\n")
            self._csv.writerow(self.columns)
            stream.flush()

    def write(self, record: dict) -> None:
        if set(record) != set(self.columns):
            missing = set(self.columns) - set(record)
            extra = set(record) - set(self.columns)
            raise ValueError(f"record does not match schema (missing {sorted(missing)}, extra {sorted(extra)})")
        if self.fmt == "csv":
            self._csv.writerow([format_value(record[c]) for c in self.columns])
        else:
            body = ",".join(f"{json.dumps(c)}:{_json_value(record[c])}" for c in self.columns)
            self.stream.write("{" + body + "}\n")
        self.stream.flush()
        self.count += 1


def emit_metrics(records: Iterable[dict], stream: IO[str], columns: Sequence[str], fmt: str = "csv") -> int:
    """Write ``records`` to ``stream``; returns the number of rows."""
    w = MetricsWriter(stream, columns, fmt)
    for r in records:
        w.write(r)
    return w.count


def metrics_to_string(records: Iterable[dict], columns: Sequence[str], fmt: str = "csv") -> str:
    buf = io.StringIO()
    emit_metrics(records, buf, columns, fmt)
    return buf.getvalue()


def read_csv(text: str) -> tuple[list[str], list[dict]]:
    """Parse csv text produced by :class:`MetricsWriter` into typed records."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ValueError("csv has no header row")
    header = rows[0]
    return header, [{c: parse_value(v) for c, v in zip(header, row)} for row in rows[1:]]


def read_jsonl(text: str) -> list[dict]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]
