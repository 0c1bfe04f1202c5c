"""Rule-based clean-up of predicted masks: VS false positives far from the cochlea, then largest components."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core_data import LabelMask

log = logging.getLogger(__name__)

VS_LABEL, COCHLEA_LABEL = 1, 2


@dataclass
class Component:
    label: int
    size: int
    centroid: tuple[float, float, float]
    bbox: tuple[tuple[int, int, int], tuple[int, int, int]]
    voxels: np.ndarray  # (n, 3) coordinates in raster order

    @property
    def min_coord(self) -> tuple[int, int, int]:
        return tuple(int(c) for c in self.voxels[0])


def _structure(connectivity: int):
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def _array(mask) -> np.ndarray:
    return mask.labels if isinstance(mask, LabelMask) else np.asarray(mask)


def connected_components(mask, k: int, connectivity: int = 26) -> list[Component]:
    """Maximal connected sets of class-k voxels, ordered by their first voxel in raster order."""
    if k not in (VS_LABEL, COCHLEA_LABEL):
        raise ValueError(f"components are only defined for foreground classes, got {k}")
    labelled, n = ndimage.label(_array(mask) == k, structure=_structure(connectivity))
    comps = []
    if n == 0:
        return comps
    coords = np.argwhere(labelled > 0)  # raster order
    ids = labelled[tuple(coords.T)]
    order = np.argsort(ids, kind="stable")
    coords, ids = coords[order], ids[order]
    bounds = np.searchsorted(ids, np.arange(1, n + 2))
    for i in range(n):
        vox = coords[bounds[i]:bounds[i + 1]]
        comps.append(Component(k, len(vox), tuple(float(c) for c in vox.mean(axis=0)),
                               (tuple(int(c) for c in vox.min(axis=0)), tuple(int(c) for c in vox.max(axis=0))),
                               vox))
    comps.sort(key=lambda c: c.min_coord)
    return comps


def _clear(labels: np.ndarray, comp: Component) -> None:
    labels[tuple(comp.voxels.T)] = 0


def remove_vs_false_positives(mask: LabelMask, z_threshold: float = 15, connectivity: int = 26,
                              z_sign: int = 1) -> tuple[LabelMask, bool]:
    """Drop VS components whose centroid lies more than `z_threshold` voxels beyond the nearest cochlea.

    The offset is z_sign * (VS centroid z - cochlea centroid z), compared with a
    strict ">". Returns (mask, cochlea_found); without any cochlea component the
    mask is returned unchanged and cochlea_found is False.
    """
    cochleae = connected_components(mask, COCHLEA_LABEL, connectivity)
    if not cochleae:
        log.warning("no cochlea component in %s; VS false-positive rule skipped", mask.case_id or "mask")
        return mask, False
    centers = np.array([c.centroid for c in cochleae])
    labels = mask.labels.copy()
    for comp in connected_components(mask, VS_LABEL, connectivity):
        c = np.asarray(comp.centroid)
        nearest = centers[np.argmin(np.linalg.norm(centers - c, axis=1))]
        if z_sign * (c[0] - nearest[0]) > z_threshold:
            _clear(labels, comp)
    return mask.with_labels(labels), True


def largest_component_per_class(mask: LabelMask, connectivity: int = 26) -> LabelMask:
    labels = mask.labels.copy()
    for k in (VS_LABEL, COCHLEA_LABEL):
        comps = connected_components(mask, k, connectivity)
        if len(comps) < 2:
            continue
        # biggest first; ties -> lexicographically smallest minimum coordinate
        keep = min(comps, key=lambda c: (-c.size, c.min_coord))
        for comp in comps:
            if comp is not keep:
                _clear(labels, comp)
    return mask.with_labels(labels)


def postprocess_mask(mask: LabelMask, z_threshold: float = 15, connectivity: int = 26,
                     z_sign: int = 1) -> LabelMask:
    """False-positive removal followed by largest-component selection, repeated until stable.

    A single pass is not always idempotent: when several cochlea components
    exist, the one that served as "nearest" may itself be discarded by the
    largest-component step. Repeating the pair reaches a fixpoint because every
    pass only removes voxels.
    """
    current = mask
    while True:
        cleaned, _ = remove_vs_false_positives(current, z_threshold, connectivity, z_sign)
        cleaned = largest_component_per_class(cleaned, connectivity)
        if np.array_equal(cleaned.labels, current.labels):
            return cleaned
        current = cleaned
