"""priorwarp: deformable anatomical-prior fitting.

A learnable multi-channel prior is deformed per case by per-class affine
shifts plus a shared thin-plate-spline field, trained by gradient descent
on Soft-Dice and centroid losses, and scored with DSC / HD95 / NSD.

Submodules import numpy and scipy; this package root stays import-light so
the CLI can pin thread counts before any numerics load.
"""

__version__ = "0.1.0"

FORMAT_VERSIONS = ("PWV1", "params v1")
