from __future__ import annotations

import math
import random

import numpy as np
import torch
import torch.nn.functional as F

from .errors import TrainingError


def seed_everything(seed: int) -> np.random.Generator:
    random.seed(seed)
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def set_deterministic(enabled: bool = True) -> None:
    """Sequential, seed-stable execution: one intra-op thread and deterministic kernels."""
    if enabled:
        torch.set_num_threads(1)
    torch.use_deterministic_algorithms(enabled)


def check_finite(value: torch.Tensor | float, context: str) -> float:
    v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
    if not math.isfinite(v):
        raise TrainingError(f"non-finite loss ({v}) during {context}")
    return v


def to_tensor(a: np.ndarray, add_dims: int = 2) -> torch.Tensor:
    t = torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))
    for _ in range(add_dims):
        t = t.unsqueeze(0)
    return t


def pad_to_multiple(x: torch.Tensor, multiple: int, spatial_dims: int = 3):
    """Replicate-pad the trailing spatial dims up to a multiple; returns (padded, original sizes)."""
    sizes = x.shape[-spatial_dims:]
    pads = []
    for n in reversed(sizes):
        pads += [0, (-n) % multiple]
    if any(pads):
        x = F.pad(x, pads, mode="replicate")
    return x, tuple(sizes)


def crop_to(x: torch.Tensor, sizes) -> torch.Tensor:
    idx = (Ellipsis,) + tuple(slice(0, n) for n in sizes)
    return x[idx]


def adam(params, lr: float, weight_decay: float = 0.0, betas=(0.9, 0.999)):
    return torch.optim.Adam(params, lr=lr, betas=betas, weight_decay=weight_decay)
