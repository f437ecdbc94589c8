"""Learnable multi-channel anatomical prior.

The prior is stored as foreground logits with an implicit background logit
of zero; normalize() runs the (c_cls + 1)-way softmax and returns only the
foreground probability channels. Normalization happens before any warping,
so deformed voxels carry interpolated probabilities, not re-normalized
logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Volume


@dataclass(frozen=True)
class AnatomicalPrior:
    """Foreground logits, one channel per class."""

    logits: Volume

    @property
    def c_cls(self) -> int:
        return self.logits.c

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.logits.dims


def softmax_fg(logits: np.ndarray) -> np.ndarray:
    """Softmax over (background=0, channels...), returning foreground probs.

    Shift-stabilized: the background logit participates as exp(-m).
    """
    m = np.maximum(logits.max(axis=0), 0.0)
    e = np.exp(logits - m)
    z = np.exp(-m) + e.sum(axis=0)
    return e / z


def normalize(prior: AnatomicalPrior) -> Volume:
    """Per-voxel class probabilities; foreground channels sum to < 1."""
    return Volume(softmax_fg(prior.logits.data), prior.logits.spacing)


def init_prior(
    c_cls: int,
    dims: tuple[int, int, int],
    seed: int,
    scale: float = 0.01,
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> AnatomicalPrior:
    """Near-uniform prior: i.i.d. normal logits with small scale."""
    if c_cls < 1:
        raise ValueError(f"c_cls must be >= 1, got {c_cls}")
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"dims must be 3 positive ints, got {dims}")
    if not (np.isfinite(scale) and scale > 0):
        raise ValueError(f"scale must be positive finite, got {scale}")
    rng = np.random.Generator(np.random.PCG64(seed))
    data = rng.normal(0.0, scale, size=(c_cls,) + dims)
    return AnatomicalPrior(Volume(data, spacing))


def logits_from_labels(labels: np.ndarray, c_cls: int, scale: float) -> np.ndarray:
    """Sharp logits: +scale on a class's own support, -scale elsewhere."""
    if not (np.isfinite(scale) and scale > 0):
        raise ValueError(f"scale must be positive finite, got {scale}")
    out = np.full((c_cls,) + labels.shape, -scale, dtype=np.float64)
    for c in range(c_cls):
        out[c][labels == c + 1] = scale
    return out


def save_prior(prior: AnatomicalPrior, path: str, seed: int | None = None) -> None:
    """Write logits as a PWV1 f32 volume plus a JSON sidecar at path + '.json'."""
    import json

    from .pwv import write_volume

    write_volume(prior.logits, path)
    sidecar = {"kind": "prior_logits", "c_cls": prior.c_cls, "seed": seed}
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh)
        fh.write("\n")


def load_prior(path: str) -> AnatomicalPrior:
    """Read logits from a PWV1 volume; the sidecar, when present, must agree."""
    import json
    import os

    from .errors import FormatError
    from .pwv import read_volume

    vol = read_volume(path)
    if not isinstance(vol, Volume):
        raise FormatError("field dtype: prior logits must be an f32 volume")
    sidecar_path = path + ".json"
    if os.path.exists(sidecar_path):
        with open(sidecar_path, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as e:
                raise FormatError(f"field sidecar: not valid JSON ({e})") from e
        if doc.get("kind") != "prior_logits":
            raise FormatError(
                f"field kind: expected 'prior_logits', got {doc.get('kind')!r}"
            )
        if doc.get("c_cls") != vol.c:
            raise FormatError(
                f"field c_cls: sidecar says {doc.get('c_cls')}, volume has {vol.c}"
            )
    return AnatomicalPrior(vol)
