"""Strict CSV readers for the documented spdelab output schemas."""

from __future__ import annotations

import csv


class SchemaError(ValueError):
    """A CSV is missing required columns or has no data rows."""


def read_csv_columns(path: str, required: list[str]) -> dict[str, list]:
    """Read a CSV into named columns, failing loudly on schema mismatch.

    Numeric cells are parsed to float where possible; missing required
    columns are reported by name.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, expected columns {required}")
        missing = [c for c in required if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing}; found {header}")
        rows = list(reader)
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    columns: dict[str, list] = {name: [] for name in header}
    for row in rows:
        for name, cell in zip(header, row):
            try:
                columns[name].append(float(cell))
            except ValueError:
                columns[name].append(cell)
    return columns
