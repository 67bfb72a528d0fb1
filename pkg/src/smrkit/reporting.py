"""Stable text output: fixed 9-significant-digit numbers, atomic writes."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from typing import Any, Iterable, Sequence

from .records import atomic_write_text

PRECISION = ".9g"


def fmt(value: Any) -> Any:
    if isinstance(value, bool) or value is None:
        return value
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return format(value, PRECISION)
    return value


def _round_floats(obj: Any) -> Any:
    # JSON numbers are re-parsed from the 9-digit form so output stays numeric
    if isinstance(obj, bool) or obj is None:
        return obj
    if isinstance(obj, float):
        if not math.isfinite(obj):
            return None
        return float(format(obj, PRECISION))
    if isinstance(obj, dict):
        return {str(k): _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    if hasattr(obj, "item"):
        return _round_floats(obj.item())
    return obj


def dumps(obj: Any, indent: int | None = 2) -> str:
    return json.dumps(_round_floats(obj), indent=indent, sort_keys=False)


def write_json(path: str | os.PathLike, obj: Any) -> None:
    atomic_write_text(path, dumps(obj) + "\n")


def write_jsonl(path: str | os.PathLike, rows: Iterable[Any]) -> None:
    atomic_write_text(path, "".join(dumps(r, indent=None) + "\n" for r in rows))


def write_csv(path: str | os.PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    atomic_write_text(path, buf.getvalue())


def read_csv(path: str | os.PathLike) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
