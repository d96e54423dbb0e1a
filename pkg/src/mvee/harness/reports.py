"""JSON and CSV report emission."""

from __future__ import annotations

import csv
import io
import json
import sys
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path
from typing import Any

FORMATS = ("json", "csv")


def _plain(value: Any) -> Any:
    if isinstance(value, bytes):
        return value.decode("utf-8", "backslashreplace")
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, Mapping):
        return {str(k): _plain(v) for k, v in value.items()}
    return value


def to_json(document: Any) -> str:
    return json.dumps(_plain(document), indent=2, sort_keys=False) + "\n"


def to_csv(rows: Iterable[Mapping[str, Any]], fields: Sequence[str] | None = None) -> str:
    rows = list(rows)
    if fields is None:
        fields = list(rows[0]) if rows else []
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(fields), extrasaction="ignore",
                            lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _plain(row.get(k)) for k in fields})
    return buf.getvalue()


def emit(document: Any, rows: Iterable[Mapping[str, Any]], *, fmt: str = "json",
         out: str | None = None, fields: Sequence[str] | None = None) -> None:
    """Write ``document`` as JSON, or ``rows`` as CSV, to ``out`` or stdout."""
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}")
    text = to_json(document) if fmt == "json" else to_csv(rows, fields)
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)
