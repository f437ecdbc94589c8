"""Fitted-parameter file: params v1.

JSON-text layout, diff-able and oracle-checkable:

    {"theta": [[h,w,d] x c_cls], "delta": [[h,w,d] x n],
     "grid": {"nh": .., "nw": .., "nd": ..}}
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import FormatError


@dataclass(frozen=True)
class DeformParams:
    """One case's fitted deformation: per-class shifts + control displacements."""

    theta: np.ndarray
    delta: np.ndarray
    grid_shape: tuple[int, int, int]

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=np.float64)
        de = np.asarray(self.delta, dtype=np.float64)
        gs = tuple(int(n) for n in self.grid_shape)
        if th.ndim != 2 or th.shape[1] != 3:
            raise ValueError(f"theta must have shape (c_cls, 3), got {th.shape}")
        if de.ndim != 2 or de.shape[1] != 3:
            raise ValueError(f"delta must have shape (n, 3), got {de.shape}")
        if len(gs) != 3 or min(gs) < 2:
            raise ValueError(f"grid_shape must be 3 entries >= 2, got {gs}")
        if gs[0] * gs[1] * gs[2] != de.shape[0]:
            raise ValueError(
                f"grid_shape {gs} implies {gs[0] * gs[1] * gs[2]} points, "
                f"delta has {de.shape[0]}"
            )
        if not (np.isfinite(th).all() and np.isfinite(de).all()):
            raise ValueError("parameters contain non-finite values")
        object.__setattr__(self, "theta", th)
        object.__setattr__(self, "delta", de)
        object.__setattr__(self, "grid_shape", gs)


def params_to_dict(p: DeformParams) -> dict:
    return {
        "theta": [[float(v) for v in row] for row in p.theta],
        "delta": [[float(v) for v in row] for row in p.delta],
        "grid": {"nh": p.grid_shape[0], "nw": p.grid_shape[1], "nd": p.grid_shape[2]},
    }


def save_params(p: DeformParams, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(params_to_dict(p), fh)
        fh.write("\n")


def _matrix(obj, key: str) -> np.ndarray:
    if not isinstance(obj, list) or not obj:
        raise FormatError(f"field {key}: expected a non-empty list of rows")
    for row in obj:
        if (
            not isinstance(row, list)
            or len(row) != 3
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in row)
        ):
            raise FormatError(f"field {key}: rows must be 3 numbers, got {row!r}")
    return np.asarray(obj, dtype=np.float64)


def load_params(path: str) -> DeformParams:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise FormatError(f"field document: not valid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise FormatError("field document: expected a JSON object")
    extra = sorted(set(doc) - {"theta", "delta", "grid"})
    if extra:
        raise FormatError(f"field document: unknown key {extra[0]!r}")
    for key in ("theta", "delta", "grid"):
        if key not in doc:
            raise FormatError(f"field {key}: missing")
    theta = _matrix(doc["theta"], "theta")
    delta = _matrix(doc["delta"], "delta")
    grid = doc["grid"]
    if not isinstance(grid, dict) or sorted(grid) != ["nd", "nh", "nw"]:
        raise FormatError(
            f"field grid: expected exactly keys nh, nw, nd, got {grid!r}"
        )
    for key in ("nh", "nw", "nd"):
        if not isinstance(grid[key], int) or isinstance(grid[key], bool):
            raise FormatError(f"field grid.{key}: expected an integer, got {grid[key]!r}")
    try:
        return DeformParams(theta, delta, (grid["nh"], grid["nw"], grid["nd"]))
    except ValueError as e:
        raise FormatError(f"field document: {e}") from e
