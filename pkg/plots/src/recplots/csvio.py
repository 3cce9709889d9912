"""Minimal CSV reading with schema validation."""

import csv


def read_columns(path: str, required: list[str]) -> dict[str, list[float]]:
    """Read a numeric CSV; raise if any required column is missing."""
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty CSV")
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise ValueError(f"{path}: missing required columns {missing}")
        cols: dict[str, list[float]] = {c: [] for c in reader.fieldnames}
        for row in reader:
            for c in reader.fieldnames:
                v = row[c]
                cols[c].append(float(v) if v not in (None, "") else float("nan"))
    return cols
