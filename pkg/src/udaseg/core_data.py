"""Volume / label / probability data model, SVOL I/O and preprocessing primitives.

Arrays are indexed (z, y, x); x is the left-right axis.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import DegenerateInputError, SvolError

NUM_CLASSES = 3
CLASS_NAMES = {0: "background", 1: "VS", 2: "cochlea"}
DOMAINS = ("source", "target", "pseudo_target")

Spacing = tuple[float, float, float]


def _check_spacing(spacing) -> Spacing:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3:
        raise ValueError(f"spacing needs 3 components, got {spacing}")
    if not all(math.isfinite(s) and s > 0 for s in spacing):
        raise ValueError(f"spacing must be strictly positive and finite, got {spacing}")
    return spacing


@dataclass(frozen=True)
class Volume:
    voxels: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)
    domain_tag: str = "source"
    case_id: str = ""

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.ndim != 3 or min(vox.shape) < 1:
            raise ValueError(f"Volume needs a non-empty 3D array, got shape {vox.shape}")
        if vox.dtype != np.float32:
            vox = vox.astype(np.float32)
        if not np.all(np.isfinite(vox)):
            raise ValueError("Volume contains non-finite voxels")
        if self.domain_tag not in DOMAINS:
            raise ValueError(f"unknown domain tag {self.domain_tag!r}")
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self):
        return self.voxels.shape

    def with_voxels(self, voxels, **changes) -> "Volume":
        return replace(self, voxels=voxels, **changes)


@dataclass(frozen=True)
class LabelMask:
    labels: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)
    case_id: str = ""

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 3 or min(lab.shape) < 1:
            raise ValueError(f"LabelMask needs a non-empty 3D array, got shape {lab.shape}")
        if lab.size and (lab.min() < 0 or lab.max() >= NUM_CLASSES):
            raise ValueError(f"labels must lie in 0..{NUM_CLASSES - 1}")
        if np.issubdtype(lab.dtype, np.floating) and not np.all(lab == np.round(lab)):
            raise ValueError("labels must be integral")
        object.__setattr__(self, "labels", lab.astype(np.uint8))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self):
        return self.labels.shape

    def with_labels(self, labels) -> "LabelMask":
        return replace(self, labels=labels)


@dataclass(frozen=True)
class ProbMap:
    """Per-voxel class probabilities, shape (K, z, y, x)."""

    probs: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)
    case_id: str = ""

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float32)
        if p.ndim != 4 or min(p.shape) < 1:
            raise ValueError(f"ProbMap needs a (K,z,y,x) array, got shape {p.shape}")
        validate_simplex(p)
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self):
        return self.probs.shape[1:]

    @property
    def num_classes(self) -> int:
        return self.probs.shape[0]

    def argmax(self) -> LabelMask:
        # np.argmax returns the first maximum, i.e. ties go to the lowest class index
        return LabelMask(np.argmax(self.probs, axis=0), self.spacing, self.case_id)


def validate_simplex(probs: np.ndarray, atol: float = 1e-5) -> None:
    if not np.all(np.isfinite(probs)):
        raise ValueError("probabilities contain non-finite values")
    if probs.min() < -atol or probs.max() > 1 + atol:
        raise ValueError("probabilities must lie in [0, 1]")
    sums = probs.sum(axis=0, dtype=np.float64)
    if np.max(np.abs(sums - 1.0)) > atol:
        raise ValueError(f"probability columns must sum to 1 (max deviation {np.max(np.abs(sums - 1.0)):.2e})")


def one_hot(labels, num_classes: int = NUM_CLASSES) -> np.ndarray:
    labels = labels.labels if isinstance(labels, LabelMask) else np.asarray(labels)
    return (np.arange(num_classes).reshape((-1,) + (1,) * labels.ndim) == labels[None]).astype(np.float32)


@dataclass
class DatasetSplit:
    training_ids: list[str] = field(default_factory=list)
    validation_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        overlap = set(self.training_ids) & set(self.validation_ids)
        if overlap:
            raise ValueError(f"training and validation ids overlap: {sorted(overlap)}")

    @property
    def all_ids(self) -> list[str]:
        return list(self.training_ids) + list(self.validation_ids)


# ---------------------------------------------------------------------------
# SVOL on-disk format: <name>.json header + <name>.raw little-endian payload


_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}

PathLike = Union[str, Path]


def _svol_paths(path: PathLike) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (".json", ".raw"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".json"), path.with_name(path.name + ".raw")


def _write_svol(path: PathLike, array: np.ndarray, spacing, dtype: str, *, domain: str,
                channels: int | None = None, extra: dict | None = None) -> None:
    header_path, raw_path = _svol_paths(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    spatial = array.shape[1:] if channels is not None else array.shape
    header = {
        "shape": [int(s) for s in spatial],
        "spacing": [float(s) for s in spacing],
        "dtype": dtype,
        "order": "zyx",
        "domain": domain,
    }
    if channels is not None:
        header["channels"] = int(channels)
    if extra:
        header.update(extra)
    data = np.ascontiguousarray(array, dtype=_DTYPES[dtype])
    raw_path.write_bytes(data.tobytes(order="C"))
    header_path.write_text(json.dumps(header, indent=1))


def _read_svol(path: PathLike) -> tuple[np.ndarray, dict]:
    header_path, raw_path = _svol_paths(path)
    try:
        header = json.loads(header_path.read_text())
        raw = raw_path.read_bytes()
    except FileNotFoundError as exc:
        raise SvolError(f"missing SVOL component: {exc.filename}") from exc
    except json.JSONDecodeError as exc:
        raise SvolError(f"malformed SVOL header {header_path}: {exc}") from exc
    if not isinstance(header, dict):
        raise SvolError(f"malformed SVOL header {header_path}")
    for key in ("shape", "spacing", "dtype", "order"):
        if key not in header:
            raise SvolError(f"SVOL header {header_path} lacks field '{key}'")
    shape = header["shape"]
    if (not isinstance(shape, list) or len(shape) != 3
            or not all(isinstance(s, int) and s >= 1 for s in shape)):
        raise SvolError(f"bad shape {shape!r} in {header_path}")
    if header["order"] != "zyx":
        raise SvolError(f"unsupported axis order {header['order']!r}")
    if header["dtype"] not in _DTYPES:
        raise SvolError(f"unsupported dtype {header['dtype']!r}")
    try:
        _check_spacing(header["spacing"])
    except (TypeError, ValueError) as exc:
        raise SvolError(f"bad spacing in {header_path}: {exc}") from exc
    channels = header.get("channels")
    if channels is not None and (not isinstance(channels, int) or channels < 1):
        raise SvolError(f"bad channel count {channels!r}")
    dtype = _DTYPES[header["dtype"]]
    full_shape = ([channels] if channels is not None else []) + shape
    expected = int(np.prod(full_shape)) * dtype.itemsize
    if len(raw) != expected:
        raise SvolError(f"{raw_path} holds {len(raw)} bytes, header implies {expected}")
    array = np.frombuffer(raw, dtype=dtype).reshape(full_shape).copy()
    if dtype.kind == "f" and not np.all(np.isfinite(array)):
        raise SvolError(f"{raw_path} contains non-finite values")
    return array, header


def write_volume(v: Volume, path: PathLike) -> None:
    _write_svol(path, v.voxels, v.spacing, "f32", domain=v.domain_tag,
                extra={"case_id": v.case_id} if v.case_id else None)


def read_volume(path: PathLike) -> Volume:
    array, header = _read_svol(path)
    if "channels" in header or header["dtype"] != "f32":
        raise SvolError("file is not a scalar f32 volume")
    domain = header.get("domain", "source")
    if domain not in DOMAINS:
        raise SvolError(f"unknown domain {domain!r}")
    return Volume(array, tuple(header["spacing"]), domain, header.get("case_id", ""))


def write_labels(m: LabelMask, path: PathLike) -> None:
    _write_svol(path, m.labels, m.spacing, "u8", domain="labels",
                extra={"case_id": m.case_id} if m.case_id else None)


def read_labels(path: PathLike) -> LabelMask:
    array, header = _read_svol(path)
    if header["dtype"] != "u8" or "channels" in header:
        raise SvolError("file is not a u8 label mask")
    try:
        return LabelMask(array, tuple(header["spacing"]), header.get("case_id", ""))
    except ValueError as exc:
        raise SvolError(str(exc)) from exc


def write_probs(p: ProbMap, path: PathLike) -> None:
    _write_svol(path, p.probs, p.spacing, "f32", domain="probs", channels=p.num_classes,
                extra={"case_id": p.case_id} if p.case_id else None)


def read_probs(path: PathLike) -> ProbMap:
    array, header = _read_svol(path)
    if "channels" not in header:
        raise SvolError("file is not a multi-channel probability map")
    try:
        return ProbMap(array, tuple(header["spacing"]), header.get("case_id", ""))
    except ValueError as exc:
        raise SvolError(str(exc)) from exc


# ---------------------------------------------------------------------------
# preprocessing


def resampled_shape(shape, spacing, target_spacing) -> tuple[int, int, int]:
    out = []
    for n, s, t in zip(shape, spacing, target_spacing):
        out.append(max(1, int(math.floor(n * s / t + 0.5))))  # round half up
    return tuple(out)


def _linear_axis(a: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    n = a.shape[axis]
    coords = np.clip(coords, 0.0, n - 1)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    frac = coords - lo
    bshape = [1] * a.ndim
    bshape[axis] = -1
    frac = frac.reshape(bshape)
    return np.take(a, lo, axis=axis) * (1.0 - frac) + np.take(a, hi, axis=axis) * frac


def _nearest_axis(a: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    n = a.shape[axis]
    idx = np.clip(np.floor(coords + 0.5).astype(np.int64), 0, n - 1)
    return np.take(a, idx, axis=axis)


def resample(v, target_spacing: Sequence[float], mode: str = "trilinear"):
    """Resample a Volume (or LabelMask, nearest only) onto a new voxel spacing.

    Output voxel i sits at physical position i * target_spacing, so the first
    voxel centre is shared between input and output grids. Coordinates beyond
    the last input voxel are clamped to the edge.
    """
    target_spacing = _check_spacing(target_spacing)
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown resampling mode {mode!r}")
    is_mask = isinstance(v, LabelMask)
    if is_mask and mode != "nearest":
        raise ValueError("label masks must be resampled with mode='nearest'")
    data = v.labels if is_mask else v.voxels
    out_shape = resampled_shape(data.shape, v.spacing, target_spacing)
    out = data.astype(np.float64) if mode == "trilinear" else data
    for axis in range(3):
        coords = np.arange(out_shape[axis]) * (target_spacing[axis] / v.spacing[axis])
        if mode == "trilinear":
            out = _linear_axis(out, coords, axis)
        else:
            out = _nearest_axis(out, coords, axis)
    if is_mask:
        return LabelMask(out, target_spacing, v.case_id)
    return replace(v, voxels=out.astype(np.float32), spacing=target_spacing)


def normalize_intensity(v: Volume) -> Volume:
    """Min-max map voxel values onto [0, 1]."""
    x = v.voxels.astype(np.float64)
    lo, hi = x.min(), x.max()
    if hi <= lo:
        raise DegenerateInputError(f"cannot normalize constant volume {v.case_id!r} (value {lo})")
    out = (x - lo) / (hi - lo)
    return replace(v, voxels=out.astype(np.float32))


def flip_lr(v):
    """Reverse the x (left-right) axis of a Volume, LabelMask, ProbMap or raw array."""
    if isinstance(v, Volume):
        return replace(v, voxels=v.voxels[:, :, ::-1].copy())
    if isinstance(v, LabelMask):
        return replace(v, labels=v.labels[:, :, ::-1].copy())
    if isinstance(v, ProbMap):
        return replace(v, probs=v.probs[..., ::-1].copy())
    return np.asarray(v)[..., ::-1].copy()
