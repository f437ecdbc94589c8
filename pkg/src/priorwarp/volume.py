"""Dense multi-channel volumes, label maps, and trilinear sampling.

Conventions used everywhere in this package:

- arrays are indexed (c, h, w, d) with d fastest (C order);
- integer coordinates land exactly on voxel centers;
- sampling outside the grid reads zero (zero padding);
- geometry is expressed in voxel units, spacing only scales metrics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Coord = tuple[float, float, float]

_SPACING_ONE = (1.0, 1.0, 1.0)


def _check_spacing(spacing) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3:
        raise ValueError(f"spacing must have 3 entries, got {len(sp)}")
    if not all(np.isfinite(s) and s > 0.0 for s in sp):
        raise ValueError(f"spacing must be positive and finite, got {sp}")
    return sp


@dataclass(frozen=True)
class Volume:
    """A (C, H, W, D) float64 array plus voxel spacing in mm.

    Values are unconstrained here; probability-range checks happen at the
    call sites that require them. Treat instances as immutable.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = _SPACING_ONE

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 4:
            raise ValueError(f"volume data must be 4-d (c, h, w, d), got ndim={arr.ndim}")
        if min(arr.shape) < 1:
            raise ValueError(f"volume dims must all be >= 1, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("volume data contains non-finite values")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def c(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[1:]


@dataclass(frozen=True)
class LabelMap:
    """An (H, W, D) integer array; 0 is background, classes are 1-based."""

    labels: np.ndarray
    spacing: tuple[float, float, float] = _SPACING_ONE

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"labels must be integers, got dtype={arr.dtype}")
        arr = arr.astype(np.int64)
        if arr.ndim != 3:
            raise ValueError(f"labels must be 3-d (h, w, d), got ndim={arr.ndim}")
        if min(arr.shape) < 1:
            raise ValueError(f"label dims must all be >= 1, got {arr.shape}")
        if arr.size and arr.min() < 0:
            raise ValueError(f"labels must be >= 0, got min={arr.min()}")
        object.__setattr__(self, "labels", arr)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape


def corner_offsets():
    """The 8 trilinear corner offsets in the fixed order used package-wide.

    Every interpolation and adjoint in this package iterates corners in this
    exact order so that floating-point sums agree bit-for-bit across code
    paths.
    """
    return [(i, j, k) for i in (0, 1) for j in (0, 1) for k in (0, 1)]


def corner_weight(frac, offset):
    """Weight of one corner given fractional coords; exact 0/1 at lattice points."""
    fh, fw, fd = frac
    i, j, k = offset
    wh = fh if i else 1.0 - fh
    ww = fw if j else 1.0 - fw
    wd = fd if k else 1.0 - fd
    return wh * ww * wd


def sample_channel(data3d: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Trilinearly sample one channel at a (3, M) float coordinate array.

    Out-of-grid reads contribute zero. At exactly integer in-grid
    coordinates the stored value is returned bit-exactly: the inhabited
    corner's weight is exactly 1.0 and every other corner's weight is
    exactly 0.0.
    """
    dh, dw, dd = data3d.shape
    base = np.floor(coords)
    frac = coords - base
    base = base.astype(np.int64)
    out = np.zeros(coords.shape[1], dtype=np.float64)
    for off in corner_offsets():
        w = corner_weight(frac, off)
        ih = base[0] + off[0]
        iw = base[1] + off[1]
        id_ = base[2] + off[2]
        ok = (ih >= 0) & (ih < dh) & (iw >= 0) & (iw < dw) & (id_ >= 0) & (id_ < dd)
        vals = np.zeros_like(out)
        if ok.any():
            vals[ok] = data3d[ih[ok], iw[ok], id_[ok]]
        # skipping w==0 corners keeps lattice-point sampling bit-exact
        contrib = np.where(w != 0.0, w * vals, 0.0)
        out += contrib
    return out


def trilinear_sample(vol: Volume, channel: int, p: Coord) -> float:
    """Sample a single channel at one (h, w, d) voxel-unit point."""
    if not 0 <= channel < vol.c:
        raise ValueError(f"channel {channel} out of range for c={vol.c}")
    q = np.asarray(p, dtype=np.float64).reshape(3, 1)
    if not np.isfinite(q).all():
        raise ValueError("sample point must be finite")
    return float(sample_channel(vol.data[channel], q)[0])


def one_hot(lm: LabelMap, c_cls: int) -> Volume:
    """Encode labels 1..c_cls as c_cls binary channels (background dropped)."""
    if c_cls < 1:
        raise ValueError(f"c_cls must be >= 1, got {c_cls}")
    if lm.labels.max(initial=0) > c_cls:
        raise ValueError(
            f"label map contains class {int(lm.labels.max())} but c_cls={c_cls}"
        )
    data = np.zeros((c_cls,) + lm.dims, dtype=np.float64)
    for c in range(c_cls):
        data[c] = (lm.labels == c + 1).astype(np.float64)
    return Volume(data, lm.spacing)


def channel_argmax(vol: Volume, tau_bg: float = 0.5) -> LabelMap:
    """Harden a multi-channel volume to labels.

    A voxel gets label argmax+1 when the winning activation exceeds tau_bg,
    else background. Ties go to the lowest channel index. Use tau_bg=0.5 for
    probability volumes and tau_bg=0.0 for one-hot input.
    """
    if not np.isfinite(tau_bg):
        raise ValueError("tau_bg must be finite")
    best = vol.data.max(axis=0)
    arg = vol.data.argmax(axis=0)
    labels = np.where(best > tau_bg, arg + 1, 0).astype(np.int64)
    return LabelMap(labels, vol.spacing)
