"""Dice and average symmetric surface distance."""
from __future__ import annotations

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .core_data import LabelMask
from .errors import UndefinedMetricError

_FACE = ndimage.generate_binary_structure(3, 1)


def _labels(m) -> np.ndarray:
    return m.labels if isinstance(m, LabelMask) else np.asarray(m)


def dice_score(pred, gt, k: int) -> float:
    p, g = _labels(pred) == k, _labels(gt) == k
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def surface_voxels(binary: np.ndarray) -> np.ndarray:
    """Voxels of `binary` with at least one face neighbour outside it (the grid border counts as outside)."""
    binary = np.asarray(binary, dtype=bool)
    eroded = ndimage.binary_erosion(binary, structure=_FACE, border_value=0)
    return binary & ~eroded


def assd(pred, gt, k: int, spacing=None) -> float:
    """Average symmetric surface distance in mm between the class-k surfaces."""
    p, g = _labels(pred) == k, _labels(gt) == k
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    if spacing is None:
        spacing = pred.spacing if isinstance(pred, LabelMask) else (1.0, 1.0, 1.0)
    sp = np.asarray(spacing, dtype=np.float64)
    sp_pts = np.argwhere(surface_voxels(p)) * sp
    sg_pts = np.argwhere(surface_voxels(g)) * sp
    if len(sp_pts) == 0 or len(sg_pts) == 0:
        raise UndefinedMetricError(f"ASSD undefined for class {k}: empty surface")
    d_pg, _ = cKDTree(sg_pts).query(sp_pts)
    d_gp, _ = cKDTree(sp_pts).query(sg_pts)
    return float((d_pg.sum() + d_gp.sum()) / (len(sp_pts) + len(sg_pts)))
