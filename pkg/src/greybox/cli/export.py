"""Grid exports: CSV matrices with a metadata comment line, and 8-bit PGM heatmaps."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from ..errors import ContractError
from ..postestim import AxisSpec

GRID_TAG = "greybox-grid v1"


def grid_to_csv(values: np.ndarray, axes: list, fixed, quantity: str, label: str = "") -> str:
    """First line: ``# greybox-grid v1; key=value; ...``; then one CSV row per axis-0 point.

    A 1-axis grid is written as a single row.
    """
    values = np.asarray(values, dtype=np.float64)
    rows = values.reshape(1, -1) if values.ndim == 1 else values
    meta = [GRID_TAG, f"quantity={quantity}", "axes=" + ",".join(a.to_text() for a in axes),
            "fixed=" + " ".join(repr(float(v)) for v in np.asarray(fixed).reshape(-1))]
    if label:
        meta.append(f"label={label}")
    buf = io.StringIO()
    buf.write("# " + "; ".join(meta) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    for row in rows:
        writer.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def parse_grid_csv(text: str) -> dict:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# " + GRID_TAG):
        raise ContractError("not a greybox grid CSV")
    meta = {}
    for item in lines[0][2:].split("; ")[1:]:
        key, _, value = item.partition("=")
        meta[key] = value
    axes = [AxisSpec.parse(t) for t in meta["axes"].split(",")]
    rows = [[float(v) for v in r] for r in csv.reader(lines[1:])]
    values = np.array(rows, dtype=np.float64)
    if len(axes) == 1:
        values = values.reshape(-1)
    return {"quantity": meta["quantity"], "axes": axes, "values": values, "label": meta.get("label", ""),
            "fixed": np.array([float(v) for v in meta["fixed"].split()])}


def heatmap_pgm(values: np.ndarray) -> bytes:
    """Binary PGM (P5); the minimum maps to 0 (black) and the maximum to 255 (white).

    Rows follow axis 0 top to bottom; a constant grid is all black.
    """
    v = np.asarray(values, dtype=np.float64)
    v = v.reshape(1, -1) if v.ndim == 1 else v
    if not np.all(np.isfinite(v)):
        raise ContractError("heatmap needs finite values")
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros(v.shape) if hi == lo else (v - lo) / (hi - lo)
    pixels = np.rint(scaled * 255).astype(np.uint8)
    height, width = pixels.shape
    return f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5" or parts[2] != b"255":
        raise ContractError("not an 8-bit binary PGM")
    width, height = (int(t) for t in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(height, width)


def write_grid_files(directory, stem: str, values, axes, fixed, quantity: str, label: str = "") -> tuple:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    csv_path, pgm_path = d / f"{stem}.csv", d / f"{stem}.pgm"
    csv_path.write_text(grid_to_csv(values, axes, fixed, quantity, label))
    pgm_path.write_bytes(heatmap_pgm(values))
    return csv_path, pgm_path


__all__ = ["grid_to_csv", "parse_grid_csv", "heatmap_pgm", "read_pgm", "write_grid_files"]
