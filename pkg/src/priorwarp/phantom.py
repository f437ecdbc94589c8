"""Synthetic multi-organ phantoms with known ground-truth warps.

A phantom is a set of disjoint ellipsoids rasterized on a voxel grid. Cases
are generated by pushing the one-hot canonical anatomy through the exact
deformation pipeline under test (per-class shifts, then the spline warp)
and re-hardening, so a fit of the canonical prior against a case has a
known answer.

Identifiability note: a spline displacement table with a uniform component
t composes with shifts theta_c - t to the identical warp, so raw draws
would make theta unrecoverable. A net compressive component over an organ
is similarly lost: it changes the organ's volume, and an overlap fit pulls
the volume back toward canonical instead of recovering the compression.
sample_case therefore projects the drawn displacements onto the subspace
with zero mass-weighted mean displacement and zero net flux over every
(shifted) organ, and reports the projected table as truth. The returned
parameters are exactly the ones a correct fit can identify.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .affine import ClassShifts, apply_class_shifts
from .tps import (
    ControlGrid,
    Displacements,
    TpsSystem,
    build_system,
    field_basis,
    solve_coefficients,
    warp_field,
    warp_volume,
)
from .volume import LabelMap, channel_argmax, one_hot

# canonical-layout clearances, in voxels
PAIR_MARGIN = 2.0
BORDER_MARGIN = 3.0


@dataclass(frozen=True)
class OrganSpec:
    """Ellipsoid in fractional coordinates: center over (dim-1), semi-axes over dim."""

    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        s = tuple(float(v) for v in self.semi_axes)
        if len(c) != 3 or not all(0.0 < v < 1.0 for v in c):
            raise ValueError(f"center fractions must lie in (0,1), got {c}")
        if len(s) != 3 or not all(0.0 < v < 0.5 for v in s):
            raise ValueError(f"semi-axis fractions must lie in (0,0.5), got {s}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "semi_axes", s)

    def center_vox(self, dims) -> np.ndarray:
        return np.array([f * (d - 1) for f, d in zip(self.center, dims)])

    def semi_vox(self, dims) -> np.ndarray:
        return np.array([f * d for f, d in zip(self.semi_axes, dims)])


def _default_organs() -> tuple[OrganSpec, ...]:
    # tetrahedral layout: each pair of centers differs in exactly two axes
    semi = (0.20, 0.18, 0.16)
    return (
        OrganSpec((0.32, 0.32, 0.32), semi),
        OrganSpec((0.68, 0.68, 0.32), semi),
        OrganSpec((0.68, 0.32, 0.68), semi),
        OrganSpec((0.32, 0.68, 0.68), semi),
    )


@dataclass(frozen=True)
class PhantomSpec:
    """Phantom family: canonical layout plus warp magnitude bounds."""

    c_cls: int = 4
    dims: tuple[int, int, int] = (32, 32, 32)
    organs: tuple[OrganSpec, ...] = field(default_factory=_default_organs)
    max_shift: float = 2.0
    max_disp: float = 2.0
    seed: int = 0
    grid_shape: tuple[int, int, int] = (3, 3, 3)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        organs = tuple(self.organs)
        if self.c_cls != len(organs):
            raise ValueError(
                f"c_cls={self.c_cls} but {len(organs)} organs specified"
            )
        if len(dims) != 3 or min(dims) < 8:
            raise ValueError(f"dims must be 3 entries >= 8, got {dims}")
        if not (self.max_shift >= 0 and self.max_disp >= 0):
            raise ValueError("warp bounds must be >= 0")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "organs", organs)
        object.__setattr__(self, "grid_shape", tuple(int(n) for n in self.grid_shape))
        self._check_margins()

    def _check_margins(self):
        dims = self.dims
        for idx, organ in enumerate(self.organs):
            c = organ.center_vox(dims)
            s = organ.semi_vox(dims)
            for axis in range(3):
                lo = c[axis] - s[axis]
                hi = (dims[axis] - 1) - (c[axis] + s[axis])
                if lo < BORDER_MARGIN or hi < BORDER_MARGIN:
                    raise ValueError(
                        f"organ {idx} violates the {BORDER_MARGIN}-voxel border "
                        f"margin on axis {axis}"
                    )
        for i in range(len(self.organs)):
            for j in range(i + 1, len(self.organs)):
                ci = self.organs[i].center_vox(dims)
                cj = self.organs[j].center_vox(dims)
                # conservative sphere bound on each ellipsoid
                ri = self.organs[i].semi_vox(dims).max()
                rj = self.organs[j].semi_vox(dims).max()
                gap = float(np.linalg.norm(ci - cj)) - ri - rj
                if gap < PAIR_MARGIN:
                    raise ValueError(
                        f"organs {i} and {j} violate the {PAIR_MARGIN}-voxel "
                        f"pair margin (gap {gap:.2f})"
                    )

    def make_grid(self) -> ControlGrid:
        return ControlGrid(self.grid_shape, self.dims)


def canonical_anatomy(spec: PhantomSpec) -> LabelMap:
    """Rasterize the organs; voxel p is inside organ k when the scaled
    squared offset sum is <= 1. Overlap raises: margins are checked
    analytically, this is the exact per-voxel backstop."""
    dims = spec.dims
    grids = np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims), indexing="ij")
    labels = np.zeros(dims, dtype=np.int64)
    for k, organ in enumerate(spec.organs):
        c = organ.center_vox(dims)
        s = organ.semi_vox(dims)
        q = sum(((g - cc) / ss) ** 2 for g, cc, ss in zip(grids, c, s))
        mask = q <= 1.0
        if (labels[mask] != 0).any():
            raise ValueError(f"organ {k} overlaps an earlier organ when rasterized")
        labels[mask] = k + 1
    return LabelMap(labels)


def _project_delta_nulls(
    delta: np.ndarray,
    theta: np.ndarray,
    canon: LabelMap,
    spec: PhantomSpec,
    basis: np.ndarray,
) -> np.ndarray:
    """Remove warp components a fit cannot attribute from delta.

    Two constraint families per organ c, with m_c the organ's mass after
    its class shift and B the spline field basis:
      - mean rows, one per axis: w_c = B^T m_c / sum(m_c). A nonzero
        mass-weighted mean displacement over an organ trades exactly
        against theta_c.
      - one flux row over the per-axis blocks: dB_a^T m_c / sum(m_c).
        Net compression changes the organ's volume, which an overlap fit
        pulls back toward canonical rather than recovering.
    Least-norm projection on the stacked rows over the flattened table
    (axis-major blocks); a final rescale keeps the table inside the bound.
    """
    h, w_, d = spec.dims
    n = basis.shape[1]
    shifted = apply_class_shifts(one_hot(canon, spec.c_cls), ClassShifts(theta))
    b4 = basis.reshape(h, w_, d, n)
    db = [np.gradient(b4, axis=a).reshape(-1, n) for a in range(3)]
    rows = []
    for c in range(spec.c_cls):
        m = shifted.data[c].ravel()
        total = m.sum()
        if total <= 0:
            continue
        w = (basis.T @ m) / total
        for a in range(3):
            r = np.zeros(3 * n)
            r[a * n : (a + 1) * n] = w
            rows.append(r)
        r = np.zeros(3 * n)
        for a in range(3):
            r[a * n : (a + 1) * n] = (db[a].T @ m) / total
        rows.append(r)
    if not rows:
        return delta
    a_mat = np.stack(rows)
    v = delta.T.ravel()
    v = v - a_mat.T @ np.linalg.solve(a_mat @ a_mat.T, a_mat @ v)
    out = v.reshape(3, n).T
    top = np.abs(out).max()
    if top > spec.max_disp and top > 0:
        out = out * (spec.max_disp / top)
    return out


def sample_case(
    spec: PhantomSpec,
    sys: TpsSystem,
    case_seed: int,
    basis: np.ndarray | None = None,
) -> tuple[LabelMap, np.ndarray, np.ndarray]:
    """Draw (theta*, delta*), warp the canonical anatomy, re-harden.

    Redraws (deterministically, bounded) if any class vanishes; returns the
    label map with the truth parameters.
    """
    canon = canonical_anatomy(spec)
    if basis is None:
        basis = field_basis(sys, spec.dims)
    for attempt in range(32):
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([spec.seed, case_seed, attempt]))
        )
        theta = rng.uniform(-spec.max_shift, spec.max_shift, (spec.c_cls, 3))
        delta = rng.uniform(-spec.max_disp, spec.max_disp, (sys.n, 3))
        delta = _project_delta_nulls(delta, theta, canon, spec, basis)
        moved = apply_class_shifts(one_hot(canon, spec.c_cls), ClassShifts(theta))
        coef = solve_coefficients(sys, Displacements(delta))
        warped = warp_volume(moved, warp_field(sys, coef, spec.dims))
        lm = channel_argmax(warped, 0.5)
        present = {int(v) for v in np.unique(lm.labels)} - {0}
        if present == set(range(1, spec.c_cls + 1)):
            return lm, theta, delta
    raise ValueError(
        f"case_seed {case_seed}: classes kept vanishing after 32 redraws; "
        f"bounds too large for this layout"
    )


def spec_to_dict(spec: PhantomSpec) -> dict:
    return {
        "c_cls": spec.c_cls,
        "dims": list(spec.dims),
        "organs": [
            {"center": list(o.center), "semi_axes": list(o.semi_axes)}
            for o in spec.organs
        ],
        "max_shift": spec.max_shift,
        "max_disp": spec.max_disp,
        "seed": spec.seed,
        "grid": {
            "nh": spec.grid_shape[0],
            "nw": spec.grid_shape[1],
            "nd": spec.grid_shape[2],
        },
    }


def spec_from_dict(doc: dict) -> PhantomSpec:
    organs = tuple(
        OrganSpec(tuple(o["center"]), tuple(o["semi_axes"])) for o in doc["organs"]
    )
    grid = doc["grid"]
    return PhantomSpec(
        c_cls=int(doc["c_cls"]),
        dims=tuple(doc["dims"]),
        organs=organs,
        max_shift=float(doc["max_shift"]),
        max_disp=float(doc["max_disp"]),
        seed=int(doc["seed"]),
        grid_shape=(grid["nh"], grid["nw"], grid["nd"]),
    )


def make_suite(spec: PhantomSpec, n_cases: int, out_dir: str) -> dict:
    """Write case_%04d.pwv files plus manifest.json; returns the manifest.

    Regenerating with the same spec reproduces bit-identical files: cases
    are pure functions of (spec, case index).
    """
    import json
    import os

    from .pwv import write_volume

    if n_cases < 1:
        raise ValueError(f"n_cases must be >= 1, got {n_cases}")
    os.makedirs(out_dir, exist_ok=True)
    sys = build_system(spec.make_grid())
    basis = field_basis(sys, spec.dims)
    cases = []
    for i in range(n_cases):
        lm, theta, delta = sample_case(spec, sys, i, basis)
        name = f"case_{i:04d}.pwv"
        write_volume(lm, os.path.join(out_dir, name))
        cases.append(
            {
                "index": i,
                "case_seed": i,
                "file": name,
                "theta": [[float(v) for v in row] for row in theta],
                "delta": [[float(v) for v in row] for row in delta],
            }
        )
    manifest = {
        "format": "phantom-suite-v1",
        "spec": spec_to_dict(spec),
        "n_cases": n_cases,
        "cases": cases,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return manifest


def large_shift_spec(seed: int = 7) -> PhantomSpec:
    """A wider-bounds family on a 40-cube for the misalignment experiments.

    Larger dims keep the canonical margins while leaving room for |theta|
    up to 6 voxels; organ size stays large enough for stable overlap.
    """
    semi = (0.14, 0.12, 0.11)
    organs = (
        OrganSpec((0.32, 0.32, 0.32), semi),
        OrganSpec((0.68, 0.68, 0.32), semi),
        OrganSpec((0.68, 0.32, 0.68), semi),
        OrganSpec((0.32, 0.68, 0.68), semi),
    )
    return PhantomSpec(
        c_cls=4,
        dims=(40, 40, 40),
        organs=organs,
        max_shift=6.0,
        max_disp=2.0,
        seed=seed,
        grid_shape=(3, 3, 3),
    )
