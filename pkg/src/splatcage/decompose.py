"""Geometric cleanup between hair and bald splat sets.

Boundary detection is a 3D proximity band: hair splats within
`boundary_radius` of any bald center. Reassignment compares boundary
splats against two feature-space class centers (interior hair vs bald)
built from weighted RGB and log-scale; splats landing nearer the bald
center are expelled from the hair set. Interior splats are never touched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import Frame, SplatSet


@dataclass
class ReassignConfig:
    boundary_radius: float
    color_weight: float = 1.0
    scale_weight: float = 1.0

    def __post_init__(self):
        if not self.boundary_radius > 0:
            raise ValueError("boundary_radius must be > 0")
        if self.color_weight < 0 or self.scale_weight < 0:
            raise ValueError("feature weights must be nonnegative")
        if self.color_weight == 0 and self.scale_weight == 0:
            raise ValueError("feature weights must not both be zero")


def chamfer(a, b) -> float:
    """Symmetric Chamfer distance between two position sets.

    Mean squared nearest-neighbor distance in each direction, summed;
    accumulation in float64.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer requires non-empty sets")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float(np.mean(d_ab ** 2, dtype=np.float64)
                 + np.mean(d_ba ** 2, dtype=np.float64))


def split_boundary(hair: SplatSet, bald: SplatSet, cfg: ReassignConfig):
    """Partition hair indices into (boundary, interior) by bald proximity."""
    if len(hair) == 0 or len(bald) == 0:
        raise ValueError("both sets must be non-empty")
    if hair.frame is not Frame.GLOBAL or bald.frame is not Frame.GLOBAL:
        raise ValueError("split_boundary expects global-frame sets")
    dist, _ = cKDTree(bald.mu.astype(np.float64)).query(hair.mu.astype(np.float64))
    boundary = np.nonzero(dist <= cfg.boundary_radius)[0]
    interior = np.nonzero(dist > cfg.boundary_radius)[0]
    return boundary.astype(np.int64), interior.astype(np.int64)


def _features(splats: SplatSet, idx, cfg: ReassignConfig) -> np.ndarray:
    color = splats.color[idx].astype(np.float64)
    logscale = np.log(splats.scale[idx].astype(np.float64))
    return np.hstack([cfg.color_weight * color, cfg.scale_weight * logscale])


def reassign(hair: SplatSet, bald: SplatSet, boundary_indices, cfg: ReassignConfig):
    """Reclassify boundary hair splats against hair/skin feature centers.

    Returns (cleaned hair SplatSet, expelled indices into the input hair
    set). Ties stay hair; interior splats pass through untouched.
    """
    boundary = np.asarray(boundary_indices, dtype=np.int64)
    mask = np.zeros(len(hair), dtype=bool)
    mask[boundary] = True
    interior = np.nonzero(~mask)[0]
    if len(interior) == 0:
        raise ValueError("no interior hair splats to anchor the hair class center")

    hair_center = _features(hair, interior, cfg).mean(axis=0)
    skin_center = _features(bald, np.arange(len(bald)), cfg).mean(axis=0)

    feats = _features(hair, boundary, cfg)
    d_hair = np.linalg.norm(feats - hair_center, axis=1)
    d_skin = np.linalg.norm(feats - skin_center, axis=1)
    expelled = boundary[d_skin < d_hair]

    keep = np.ones(len(hair), dtype=bool)
    keep[expelled] = False
    return hair.select(np.nonzero(keep)[0]), expelled
