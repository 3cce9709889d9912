"""Shared file formats.

Binary matrices are stored as one line of JSON ``{"rows": r, "cols": c}``
followed by row-major little-endian float32 data. The same framing is used
for codebooks, checkpoints and exported embedding matrices.
"""

import json
import os
from typing import IO, Iterable, Iterator

import numpy as np


def write_matrix(f: IO[bytes], arr: np.ndarray) -> None:
    a = np.ascontiguousarray(arr, dtype="<f4")
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ValueError(f"expected 1-D or 2-D array, got shape {arr.shape}")
    header = json.dumps({"rows": int(a.shape[0]), "cols": int(a.shape[1])})
    f.write(header.encode("ascii") + b"\n")
    f.write(a.tobytes(order="C"))


def read_matrix(f: IO[bytes]) -> np.ndarray:
    header = f.readline()
    if not header:
        raise ValueError("truncated matrix file: missing header")
    meta = json.loads(header)
    rows, cols = int(meta["rows"]), int(meta["cols"])
    buf = f.read(rows * cols * 4)
    if len(buf) != rows * cols * 4:
        raise ValueError(f"truncated matrix payload: wanted {rows * cols * 4} bytes, got {len(buf)}")
    return np.frombuffer(buf, dtype="<f4").reshape(rows, cols).copy()


def save_matrix(path: str, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_matrix(f, arr)


def load_matrix(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        return read_matrix(f)


def write_jsonl(path: str, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_jsonl(path: str) -> Iterator[tuple[int, dict]]:
    """Yields (1-based line number, parsed object); raises with the line number on bad JSON."""
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: malformed JSON on line {lineno}: {exc}") from exc


def write_csv(path: str, header: list[str], rows: Iterable[Iterable]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(str(v) for v in row) + "\n")


def ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path
