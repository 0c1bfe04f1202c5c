"""Inference-time fusion of three models' outputs as confident-learning label correction.

One model's argmax mask is treated as a noisy labelling and corrected against
another model's softmax output; the result is then corrected again with the
third model.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import permutations
from typing import Sequence

import numpy as np

from .core_data import LabelMask, ProbMap


@dataclass
class FusionReport:
    thresholds: list[float]
    confident_joint: list[list[int]]
    flagged_count: list[list[int]]
    corrected_count: int
    voxels_counted: int = 0
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            # +inf thresholds (class absent from the noisy labels) serialise as null
            "thresholds": [None if math.isinf(t) else t for t in self.thresholds],
            "confident_joint": self.confident_joint,
            "flagged_count": self.flagged_count,
            "corrected_count": self.corrected_count,
            "voxels_counted": self.voxels_counted,
            **({"meta": self.meta} if self.meta else {}),
        }


def _flat(ref, noisy) -> tuple[np.ndarray, np.ndarray]:
    p = ref.probs if isinstance(ref, ProbMap) else np.asarray(ref)
    y = noisy.labels if isinstance(noisy, LabelMask) else np.asarray(noisy)
    if p.shape[1:] != y.shape:
        raise ValueError(f"probability map {p.shape[1:]} and labels {y.shape} differ in shape")
    return p.reshape(p.shape[0], -1).astype(np.float64), y.reshape(-1).astype(np.int64)


def class_thresholds(ref, noisy) -> np.ndarray:
    """Per-class mean self-confidence; +inf for classes absent from the noisy labels."""
    p, y = _flat(ref, noisy)
    k = p.shape[0]
    t = np.full(k, np.inf)
    for j in range(k):
        sel = y == j
        if sel.any():
            t[j] = p[j, sel].mean()
    return t


def _assign(p: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per voxel: (is counted, confident class) where the class is the argmax over classes above threshold."""
    above = p >= t[:, None]
    counted = above.any(axis=0)
    masked = np.where(above, p, -np.inf)
    return counted, np.argmax(masked, axis=0)  # first max -> lowest class index on ties


def _thresholds_or_default(p_flat, y_flat, ref, noisy, thresholds):
    if thresholds is None:
        return class_thresholds(ref, noisy)
    t = np.asarray(thresholds, dtype=np.float64)
    if t.shape != (p_flat.shape[0],):
        raise ValueError(f"expected {p_flat.shape[0]} thresholds, got {t.shape}")
    return t


def confident_joint(ref, noisy, thresholds=None) -> np.ndarray:
    p, y = _flat(ref, noisy)
    t = _thresholds_or_default(p, y, ref, noisy, thresholds)
    k = p.shape[0]
    counted, j = _assign(p, t)
    return np.bincount(y[counted] * k + j[counted], minlength=k * k).reshape(k, k).astype(np.int64)


def flag_errors(ref, noisy, thresholds=None) -> np.ndarray:
    """Boolean mask (shape of `noisy`) of voxels counted off-diagonal in the confident joint."""
    p, y = _flat(ref, noisy)
    t = _thresholds_or_default(p, y, ref, noisy, thresholds)
    counted, j = _assign(p, t)
    shape = noisy.labels.shape if isinstance(noisy, LabelMask) else np.asarray(noisy).shape
    return (counted & (j != y)).reshape(shape)


def fuse_pair(ref: ProbMap, noisy: LabelMask, thresholds=None) -> tuple[LabelMask, FusionReport]:
    p, y = _flat(ref, noisy)
    t = _thresholds_or_default(p, y, ref, noisy, thresholds)
    k = p.shape[0]
    counted, j = _assign(p, t)
    joint = np.bincount(y[counted] * k + j[counted], minlength=k * k).reshape(k, k)
    flagged = counted & (j != y)
    ref_arg = np.argmax(p, axis=0)
    fused = np.where(flagged, ref_arg, y)
    offdiag = joint.copy()
    np.fill_diagonal(offdiag, 0)
    report = FusionReport(
        thresholds=[float(v) for v in t],
        confident_joint=joint.astype(int).tolist(),
        flagged_count=offdiag.astype(int).tolist(),
        corrected_count=int(np.count_nonzero(flagged & (ref_arg != y))),
        voxels_counted=int(counted.sum()),
    )
    labels = noisy.labels if isinstance(noisy, LabelMask) else np.asarray(noisy)
    spacing = noisy.spacing if isinstance(noisy, LabelMask) else ref.spacing
    case_id = noisy.case_id if isinstance(noisy, LabelMask) else ref.case_id
    return LabelMask(fused.reshape(labels.shape), spacing, case_id), report


def _check_order(order, n=3) -> tuple[int, ...]:
    order = tuple(int(o) for o in order)
    if sorted(order) != list(range(n)):
        raise ValueError(f"fusion order must be a permutation of 0..{n - 1}, got {order}")
    return order


def fuse_three(probs_1: ProbMap, probs_2: ProbMap, probs_3: ProbMap, order: Sequence[int] = (0, 1, 2),
               thresholds: Sequence | None = None):
    """Two-step fusion. Returns (fused mask, [report step 1, report step 2]).

    `thresholds`, when given, holds one precomputed threshold vector per step
    (used for dataset-wide statistics).
    """
    order = _check_order(order)
    maps = (probs_1, probs_2, probs_3)
    shapes = {m.shape for m in maps}
    if len(shapes) != 1:
        raise ValueError(f"probability maps differ in shape: {shapes}")
    t1, t2 = thresholds if thresholds is not None else (None, None)
    noisy = maps[order[0]].argmax()
    step1, r1 = fuse_pair(maps[order[1]], noisy, t1)
    step2, r2 = fuse_pair(maps[order[2]], step1, t2)
    r1.meta = {"step": 1, "noisy": order[0], "reference": order[1]}
    r2.meta = {"step": 2, "noisy": "step1", "reference": order[2]}
    return step2, [r1, r2]


def pooled_thresholds(refs: Sequence[ProbMap], noisies: Sequence[LabelMask]) -> np.ndarray:
    """Class thresholds computed over all voxels of several volumes at once."""
    k = refs[0].num_classes
    sums, counts = np.zeros(k), np.zeros(k)
    for ref, noisy in zip(refs, noisies):
        p, y = _flat(ref, noisy)
        for j in range(k):
            sel = y == j
            sums[j] += p[j, sel].sum()
            counts[j] += sel.sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.inf)


def fuse_dataset(triples: Sequence[tuple[ProbMap, ProbMap, ProbMap]], order=(0, 1, 2),
                 scope: str = "volume"):
    """Fuse many cases; `scope` selects per-volume or dataset-wide thresholds."""
    order = _check_order(order)
    if scope == "volume":
        return [fuse_three(*tri, order=order) for tri in triples]
    if scope != "dataset":
        raise ValueError(f"unknown threshold scope {scope!r}")
    noisy = [tri[order[0]].argmax() for tri in triples]
    t1 = pooled_thresholds([tri[order[1]] for tri in triples], noisy)
    step1 = [fuse_pair(tri[order[1]], n, t1)[0] for tri, n in zip(triples, noisy)]
    t2 = pooled_thresholds([tri[order[2]] for tri in triples], step1)
    return [fuse_three(*tri, order=order, thresholds=(t1, t2)) for tri in triples]


ALL_ORDERS = tuple(permutations(range(3)))
