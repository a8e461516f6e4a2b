"""Deterministic file writers: PGM (P5), JSON sidecars, CSV tables."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

TWO_PI = 2.0 * np.pi


def _plain(obj):
    """JSON fallback for numpy scalars, arrays and paths."""
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if isinstance(obj, Path):
        return obj.as_posix()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_plain) + "\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_json(obj), encoding="utf-8")
    return path


def write_pgm(path, levels: np.ndarray, maxval: int | None = None) -> Path:
    """Binary PGM from an integer image; 16-bit samples are big-endian."""
    levels = np.asarray(levels)
    if levels.ndim != 2:
        raise ValueError("PGM needs a 2-D image")
    if maxval is None:
        maxval = 255 if levels.max(initial=0) <= 255 else 65535
    if not 0 < maxval <= 65535:
        raise ValueError("maxval must be in 1..65535")
    if levels.min(initial=0) < 0 or levels.max(initial=0) > maxval:
        raise ValueError("pixel values out of range")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    h, w = levels.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(levels.astype(dtype).tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    return np.frombuffer(data[pos + 1:], dtype=dtype, count=w * h).reshape(h, w).astype(np.int64)


def phase_to_levels(phase: np.ndarray) -> np.ndarray:
    """Map phases onto 8-bit grey levels over [0, 2pi)."""
    wrapped = np.mod(np.asarray(phase, dtype=float), TWO_PI)
    return np.minimum((wrapped / TWO_PI * 256).astype(np.int64), 255)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(row)
    return path
