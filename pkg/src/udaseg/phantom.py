"""Paired two-domain synthetic cases with known ground truth.

Each case is a textured ellipsoidal "head" shifted by a random integer offset,
with a large ellipsoid (VS, label 1) on the +x side and a small adjacent
ellipsoid (cochlea, label 2). Source and target images are rendered from the
same latent tissue map through different appearance models, so they share
geometry but differ in intensity statistics.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core_data import (DatasetSplit, LabelMask, Volume, normalize_intensity, read_labels,
                        read_volume, write_labels, write_volume)

# latent tissue intensities before the domain appearance model
AIR, TISSUE, VS, COCHLEA = 0.05, 0.40, 0.75, 0.95

# most common target spacing, z-first (x/y values reordered from the published x,y,z tuple)
PHANTOM_SPACING = (1.5, 0.468975, 0.46875)


@dataclass(frozen=True)
class DomainAppearance:
    gamma: float = 1.0
    invert: bool = False
    noise_sigma: float = 0.03
    smoothing_sigma: float = 0.0


@dataclass(frozen=True)
class PhantomParams:
    grid_shape: tuple[int, int, int] = (32, 64, 64)
    vs_radius_range: tuple[float, float] = (6.0, 8.0)
    vs_z_ratio: float = 0.6  # VS extent along z relative to in-plane
    cochlea_radius_range: tuple[float, float] = (1.6, 2.2)
    head_radii: tuple[float, float, float] = (12.0, 26.0, 26.0)
    head_shift: int = 3
    anatomy_offset_x: float = 12.0
    anatomy_jitter: float = 1.5
    texture_amplitude: float = 0.08
    spacing: tuple[float, float, float] = PHANTOM_SPACING
    source: DomainAppearance = field(default_factory=lambda: DomainAppearance(1.0, False, 0.03, 0.0))
    target: DomainAppearance = field(default_factory=lambda: DomainAppearance(0.7, True, 0.04, 0.6))

    def validate(self):
        z, y, x = self.grid_shape
        if min(self.grid_shape) < 8:
            raise ValueError(f"grid too small: {self.grid_shape}")
        lo, hi = self.vs_radius_range
        clo, chi = self.cochlea_radius_range
        if not (0 < lo <= hi and 0 < clo <= chi and self.vs_z_ratio > 0):
            raise ValueError("radius ranges must be positive and ordered")
        for app in (self.source, self.target):
            if app.noise_sigma < 0 or app.smoothing_sigma < 0 or app.gamma <= 0:
                raise ValueError(f"invalid domain appearance {app}")
        # head (plus shift) must fit
        for radius, n in zip(self.head_radii, self.grid_shape):
            if radius + self.head_shift + 1 > n / 2:
                raise ValueError(f"head radius {radius} does not fit grid axis of {n}")
        # anatomy must stay inside the grid for every shift/jitter draw
        reach_x = self.head_shift + self.anatomy_offset_x + self.anatomy_jitter + hi + 2 * chi + 2
        reach_z = self.head_shift + self.anatomy_jitter + self.vs_z_ratio * hi + chi + 1
        if reach_x > x / 2 - 1 or reach_z > z / 2 - 1:
            raise ValueError("VS/cochlea radii exceed the grid")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomParams":
        d = dict(d)
        for key in ("source", "target"):
            if key in d and isinstance(d[key], dict):
                d[key] = DomainAppearance(**d[key])
        for key in ("grid_shape", "vs_radius_range", "cochlea_radius_range", "head_radii", "spacing"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class PhantomCase:
    source_image: Volume
    target_image: Volume
    gt_mask: LabelMask
    seed: int

    @property
    def case_id(self) -> str:
        return self.gt_mask.case_id


def _ellipsoid(grid, center, radii):
    zz, yy, xx = grid
    return (((zz - center[0]) / radii[0]) ** 2 + ((yy - center[1]) / radii[1]) ** 2
            + ((xx - center[2]) / radii[2]) ** 2) <= 1.0


def _render(latent, head, appearance: DomainAppearance, rng):
    img = np.power(latent, appearance.gamma)
    if appearance.invert:
        # tissue contrast flips; air stays dark, as it does in every MR sequence
        img = np.where(head, 1.0 - img, img)
    if appearance.smoothing_sigma > 0:
        img = ndimage.gaussian_filter(img, appearance.smoothing_sigma)
    if appearance.noise_sigma > 0:
        img = img + rng.normal(0.0, appearance.noise_sigma, img.shape)
    return img


def case_id_for(seed: int) -> str:
    return f"phantom_{seed:06d}"


def generate_case(seed: int, params: PhantomParams | None = None) -> PhantomCase:
    params = params or PhantomParams()
    params.validate()
    rng = np.random.default_rng(seed)
    shape = params.grid_shape
    grid = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")

    shift = rng.integers(-params.head_shift, params.head_shift + 1, size=3)
    head_c = np.array([(n - 1) / 2 for n in shape]) + shift
    head = _ellipsoid(grid, head_c, params.head_radii)

    vs_r = rng.uniform(*params.vs_radius_range)
    vs_radii = (params.vs_z_ratio * vs_r, vs_r * rng.uniform(0.85, 1.0), vs_r)
    jitter = rng.uniform(-params.anatomy_jitter, params.anatomy_jitter, size=3)
    vs_c = head_c + np.array([0.0, 0.0, params.anatomy_offset_x]) + jitter
    vs = _ellipsoid(grid, vs_c, vs_radii)

    co_r = rng.uniform(*params.cochlea_radius_range)
    # cochlea sits beside the VS toward +x/-y with a one-voxel gap
    angle = rng.uniform(-0.6, 0.6)
    direction = np.array([0.0, -np.sin(angle + 0.8), np.cos(angle + 0.8)])
    dist = vs_r + co_r + 1.5
    co_c = vs_c + dist * direction + np.array([rng.uniform(-1.0, 1.0), 0.0, 0.0])
    cochlea = _ellipsoid(grid, co_c, (co_r, co_r, co_r)) & ~ndimage.binary_dilation(vs)

    labels = np.zeros(shape, dtype=np.uint8)
    labels[vs] = 1
    labels[cochlea] = 2

    texture = ndimage.gaussian_filter(rng.normal(size=shape), 2.0)
    texture /= np.abs(texture).max() + 1e-12
    latent = np.full(shape, AIR)
    latent[head] = TISSUE + params.texture_amplitude * texture[head]
    latent[vs] = VS + 0.5 * params.texture_amplitude * texture[vs]
    latent[cochlea] = COCHLEA
    latent = np.clip(latent, 0.0, 1.0)

    cid = case_id_for(seed)
    src = _render(latent, head, params.source, rng)
    tgt = _render(latent, head, params.target, rng)
    source = normalize_intensity(Volume(src, params.spacing, "source", cid))
    target = normalize_intensity(Volume(tgt, params.spacing, "target", cid))
    return PhantomCase(source, target, LabelMask(labels, params.spacing, cid), int(seed))


def split_sizes(n_cases: int) -> tuple[int, int]:
    """Training/validation sizes following the 185:25 ratio, with at least one of each."""
    if n_cases < 2:
        raise ValueError("a dataset needs at least 2 cases")
    n_train = min(max(1, int(np.floor(n_cases * 185 / 210 + 0.5))), n_cases - 1)
    return n_train, n_cases - n_train


def generate_dataset(n_cases: int, seed: int, params: PhantomParams | None = None):
    n_train, _ = split_sizes(n_cases)
    cases = [generate_case(seed + i, params) for i in range(n_cases)]
    order = np.random.default_rng(seed).permutation(n_cases)
    train = sorted(int(i) for i in order[:n_train])
    val = sorted(int(i) for i in order[n_train:])
    split = DatasetSplit([cases[i].case_id for i in train], [cases[i].case_id for i in val])
    return cases, split


def save_cases(root, cases, split: DatasetSplit | None = None, extra: dict | None = None) -> Path:
    root = Path(root)
    for case in cases:
        d = root / "cases" / case.case_id
        write_volume(case.source_image, d / "source")
        write_volume(case.target_image, d / "target")
        write_labels(case.gt_mask, d / "gt")
    manifest = {
        "cases": [{"id": c.case_id, "seed": c.seed} for c in cases],
        "split": {
            "training": list(split.training_ids) if split else [],
            "validation": list(split.validation_ids) if split else [],
        },
    }
    if extra:
        manifest.update(extra)
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_case(root, case_id: str) -> PhantomCase:
    d = Path(root) / "cases" / case_id
    manifest = json.loads((Path(root) / "manifest.json").read_text())
    seeds = {c["id"]: c["seed"] for c in manifest["cases"]}
    return PhantomCase(read_volume(d / "source"), read_volume(d / "target"), read_labels(d / "gt"),
                       seeds.get(case_id, -1))
