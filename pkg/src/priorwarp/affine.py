"""Per-class translation stage.

Each class channel c is resampled under the map p -> p + theta_c (backward
warping: output voxel p reads the source at p + theta_c). Because the shift
is constant across the lattice, all voxels share the same 8 trilinear corner
weights, so the warp reduces to at most 8 shifted-slice adds per channel.
At theta_c = 0 the channel passes through bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Coord, Volume, corner_offsets, corner_weight


@dataclass(frozen=True)
class ClassShifts:
    """A (c_cls, 3) array of per-class voxel-unit translations."""

    theta: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.theta, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ValueError(f"theta must have shape (c_cls, 3), got {arr.shape}")
        if arr.shape[0] < 1:
            raise ValueError("theta must cover at least one class")
        if not np.isfinite(arr).all():
            raise ValueError("theta contains non-finite values")
        object.__setattr__(self, "theta", arr)

    @property
    def c_cls(self) -> int:
        return self.theta.shape[0]


def affine_map(p: Coord, theta_c: np.ndarray) -> np.ndarray:
    """Map one point under the shift for a single class: p + theta_c."""
    q = np.asarray(p, dtype=np.float64)
    t = np.asarray(theta_c, dtype=np.float64)
    if q.shape != (3,) or t.shape != (3,):
        raise ValueError(f"expected 3-vectors, got {q.shape} and {t.shape}")
    return q + t


def shifted_copy(arr: np.ndarray, s: tuple[int, int, int]) -> np.ndarray:
    """out[p] = arr[p + s] with zero fill outside the grid."""
    out = np.zeros_like(arr)
    src = []
    dst = []
    for axis, step in enumerate(s):
        n = arr.shape[axis]
        lo = max(0, -step)
        hi = min(n, n - step)
        if lo >= hi:
            return out
        dst.append(slice(lo, hi))
        src.append(slice(lo + step, hi + step))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def shift_sample(arr: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Resample one 3-d array under output <- source at p + t.

    Corners with exactly zero weight are skipped, which makes integer (and
    in particular zero) shifts bit-exact slice copies.
    """
    base = np.floor(t).astype(np.int64)
    frac = t - np.floor(t)
    out = np.zeros_like(arr)
    for off in corner_offsets():
        w = corner_weight(frac, off)
        if w == 0.0:
            continue
        shifted = shifted_copy(arr, tuple(base + np.asarray(off)))
        out += w * shifted
    return out


def shift_scatter(grad_out: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Adjoint of shift_sample: accumulate output-side gradient onto the source."""
    base = np.floor(t).astype(np.int64)
    frac = t - np.floor(t)
    out = np.zeros_like(grad_out)
    for off in corner_offsets():
        w = corner_weight(frac, off)
        if w == 0.0:
            continue
        # reading source at p + s scatters back with the negated shift
        out += w * shifted_copy(grad_out, tuple(-(base + np.asarray(off))))
    return out


def shift_sample_with_dt(arr: np.ndarray, t: np.ndarray):
    """shift_sample plus its derivative w.r.t. t, sharing the slice copies.

    Returns (sampled, dt) with dt of shape (3, h, w, d). The derivative of
    each corner weight w.r.t. the fractional part is the signed product of
    the other two axes' factors (a.e. derivative, right-continuous cells).
    """
    base = np.floor(t).astype(np.int64)
    frac = t - np.floor(t)
    fh, fw, fd = float(frac[0]), float(frac[1]), float(frac[2])
    out = np.zeros_like(arr)
    dt = np.zeros((3,) + arr.shape, dtype=np.float64)
    for off in corner_offsets():
        i, j, k = off
        wh = fh if i else 1.0 - fh
        ww = fw if j else 1.0 - fw
        wd = fd if k else 1.0 - fd
        w = (wh * ww) * wd
        dw = (
            (1.0 if i else -1.0) * (ww * wd),
            (1.0 if j else -1.0) * (wh * wd),
            (1.0 if k else -1.0) * (wh * ww),
        )
        if w == 0.0 and all(v == 0.0 for v in dw):
            continue
        shifted = shifted_copy(arr, tuple(base + np.asarray(off)))
        if w != 0.0:
            out += w * shifted
        for axis in range(3):
            if dw[axis] != 0.0:
                dt[axis] += dw[axis] * shifted
    return out, dt


def shift_sample_dt(arr: np.ndarray, t: np.ndarray) -> np.ndarray:
    """d(shift_sample)/dt as a (3, h, w, d) array (a.e. derivative)."""
    return shift_sample_with_dt(arr, t)[1]


def apply_class_shifts(prior: Volume, shifts: ClassShifts) -> Volume:
    """Warp each channel by its own translation; channel counts must match."""
    if prior.c != shifts.c_cls:
        raise ValueError(
            f"prior has {prior.c} channels but shifts cover {shifts.c_cls} classes"
        )
    out = np.empty_like(prior.data)
    for c in range(prior.c):
        out[c] = shift_sample(prior.data[c], shifts.theta[c])
    return Volume(out, prior.spacing)
