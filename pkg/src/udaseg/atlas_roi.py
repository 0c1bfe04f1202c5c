"""Single-atlas ROI extraction via exhaustive integer-translation NCC search."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import signal

from .core_data import LabelMask, Volume, flip_lr
from .errors import DegenerateInputError

# NCC values closer than this are treated as ties (FFT round-off is ~1e-12)
NCC_TIE_DECIMALS = 9


@dataclass(frozen=True)
class TranslationTransform:
    """Integer displacement d such that moving[p - d] lines up with atlas[p]."""

    displacement: tuple[int, int, int]
    ncc: float = float("nan")

    def to_dict(self):
        return {"displacement": list(self.displacement), "ncc": self.ncc}


@dataclass(frozen=True)
class RoiBox:
    origin: tuple[int, int, int]
    size: int

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("ROI size must be positive")
        object.__setattr__(self, "origin", tuple(int(o) for o in self.origin))

    def to_dict(self):
        return {"origin": list(self.origin), "size": self.size}


def shift_array(a: np.ndarray, d, fill=0) -> np.ndarray:
    """out[p] = a[p - d], with `fill` where p - d falls outside the array."""
    out = np.full_like(a, fill)
    src, dst = [], []
    for n, k in zip(a.shape, d):
        k = int(k)
        if abs(k) >= n:
            return out
        dst.append(slice(max(k, 0), n + min(k, 0)))
        src.append(slice(max(-k, 0), n - max(k, 0)))
    out[tuple(dst)] = a[tuple(src)]
    return out


def ncc_map(moving: np.ndarray, atlas: np.ndarray, radius: int) -> np.ndarray:
    """NCC over the overlap for every shift in [-radius, radius]^3.

    Entry [dz+r, dy+r, dx+r] scores moving shifted by (dz, dy, dx); shifts whose
    overlap has zero variance are NaN.
    """
    m = moving.astype(np.float64)
    a = atlas.astype(np.float64)
    ones = np.ones_like(a)

    def corr(x, y):
        return signal.correlate(x, y, mode="full", method="fft")

    center = tuple(n - 1 for n in m.shape)
    sl = tuple(slice(c - radius, c + radius + 1) for c in center)
    n = np.rint(corr(ones, ones)[sl])
    sa = corr(a, ones)[sl]
    sm = corr(ones, m)[sl]
    saa = corr(a * a, ones)[sl]
    smm = corr(ones, m * m)[sl]
    sma = corr(a, m)[sl]
    with np.errstate(divide="ignore", invalid="ignore"):
        var_a = saa - sa * sa / n
        var_m = smm - sm * sm / n
        cov = sma - sa * sm / n
        ncc = cov / np.sqrt(var_a * var_m)
    degenerate = (n < 2) | (var_a <= 1e-9 * n) | (var_m <= 1e-9 * n)
    ncc[degenerate] = np.nan
    return ncc


def register_translation(moving: Volume, atlas: Volume, radius: int) -> TranslationTransform:
    if moving.shape != atlas.shape:
        raise ValueError(f"moving {moving.shape} and atlas {atlas.shape} differ in shape")
    if not np.allclose(moving.spacing, atlas.spacing):
        raise ValueError("moving and atlas spacing differ")
    radius = int(radius)
    if radius < 0:
        raise ValueError("search radius must be non-negative")
    radius = min(radius, max(moving.shape) - 1)
    scores = ncc_map(moving.voxels, atlas.voxels, radius)
    valid = np.isfinite(scores)
    if not valid.any():
        raise DegenerateInputError("every candidate overlap has zero variance")
    offsets = np.stack(np.meshgrid(*(np.arange(-radius, radius + 1),) * 3, indexing="ij"), -1).reshape(-1, 3)
    flat = np.round(scores.reshape(-1), NCC_TIE_DECIMALS)
    flat[~valid.reshape(-1)] = -np.inf
    l1 = np.abs(offsets).sum(axis=1)
    # lexsort: last key is primary -> best score, then small L1, then (dz, dy, dx)
    order = np.lexsort((offsets[:, 2], offsets[:, 1], offsets[:, 0], l1, -flat))
    best = order[0]
    return TranslationTransform(tuple(int(v) for v in offsets[best]), float(scores.reshape(-1)[best]))


def _extract(a: np.ndarray, origin, size: int) -> tuple[np.ndarray, bool]:
    out = np.zeros((size,) * 3, dtype=a.dtype)
    src, dst = [], []
    padded = False
    for o, n in zip(origin, a.shape):
        lo, hi = max(o, 0), min(o + size, n)
        if hi <= lo:
            raise ValueError(f"ROI at origin {tuple(origin)} (size {size}) lies fully outside shape {a.shape}")
        padded |= lo != o or hi != o + size
        src.append(slice(lo, hi))
        dst.append(slice(lo - o, hi - o))
    out[tuple(dst)] = a[tuple(src)]
    return out, padded


def crop_roi(v, t: TranslationTransform, atlas_box: RoiBox):
    """Cut the atlas box, moved into `v`'s frame by -t, out of a Volume or LabelMask.

    Returns (roi, padded); out-of-range voxels are zero and set `padded`.
    """
    origin = [o - d for o, d in zip(atlas_box.origin, t.displacement)]
    if isinstance(v, LabelMask):
        arr, padded = _extract(v.labels, origin, atlas_box.size)
        return replace(v, labels=arr), padded
    arr, padded = _extract(v.voxels, origin, atlas_box.size)
    return replace(v, voxels=arr), padded


def crop_bilateral(v: Volume, atlas: Volume, atlas_box: RoiBox, radius: int):
    """Right and left ROIs; the left one is taken from the flipped volume so it shares the atlas orientation."""
    right, _ = crop_roi(v, register_translation(v, atlas, radius), atlas_box)
    flipped = flip_lr(v)
    left, _ = crop_roi(flipped, register_translation(flipped, atlas, radius), atlas_box)
    return right, left


def roi_box_around(mask: LabelMask, size: int) -> RoiBox:
    """Cube of edge `size` centred on the foreground bounding box, kept inside the grid where possible."""
    fg = np.argwhere(mask.labels > 0)
    if fg.size == 0:
        raise DegenerateInputError("cannot place an ROI on an empty mask")
    center = (fg.min(axis=0) + fg.max(axis=0) + 1) / 2.0
    origin = []
    for c, n in zip(center, mask.shape):
        o = int(np.floor(c - size / 2.0 + 0.5))
        o = min(max(o, 0), max(n - size, 0))
        origin.append(o)
    return RoiBox(tuple(origin), size)
