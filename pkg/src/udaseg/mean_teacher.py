"""Mean-teacher refinement on pseudo-labelled and unlabelled real target images."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch

from . import _torch_utils as tu
from .checkpoint import Checkpoint
from .core_data import ProbMap, Volume, one_hot
from .errors import TrainingError
from .segmentation import (TrainResult, _forward_probs, _pairs, dice_ce_terms, segmenter_checkpoint,
                           segmenter_from_checkpoint)

log = logging.getLogger(__name__)

GAMMA_RANGE = (0.7, 1.4)
NOISE_RANGE = (0.0, 0.1)
SHIFT_RANGE = (-0.1, 0.1)


def ema_update(teacher_params: Mapping, student_params: Mapping, alpha: float) -> dict:
    """teacher' = alpha * teacher + (1 - alpha) * student, per named parameter."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"EMA decay must lie in [0, 1], got {alpha}")
    if set(teacher_params) != set(student_params):
        raise ValueError("teacher and student parameter names differ")
    out = {}
    for name, t in teacher_params.items():
        s = student_params[name]
        if tuple(np.shape(t)) != tuple(np.shape(s)):
            raise ValueError(f"parameter {name}: shape {np.shape(t)} vs {np.shape(s)}")
        out[name] = alpha * t + (1.0 - alpha) * s
    return out


@torch.no_grad()
def ema_update_module(teacher: torch.nn.Module, student: torch.nn.Module, alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"EMA decay must lie in [0, 1], got {alpha}")
    t_params = dict(teacher.named_parameters())
    for name, s in student.named_parameters():
        t = t_params[name]
        if alpha == 0.0:
            t.copy_(s)
        elif alpha != 1.0:
            t.mul_(alpha).add_(s, alpha=1.0 - alpha)


def augment_array(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    gamma = rng.uniform(*GAMMA_RANGE)
    sigma = rng.uniform(*NOISE_RANGE)
    shift = rng.uniform(*SHIFT_RANGE)
    y = np.power(np.clip(x, 0.0, 1.0), gamma) + shift + rng.normal(0.0, sigma, x.shape)
    return np.clip(y, 0.0, 1.0).astype(np.float32)


def intensity_augment(v: Volume, seed: int) -> Volume:
    """Random gamma, Gaussian noise and brightness shift, clamped to [0, 1]; geometry untouched."""
    return v.with_voxels(augment_array(v.voxels, np.random.default_rng(seed)))


def consistency_loss(student_probs, teacher_probs):
    """Mean squared difference over every class-voxel entry."""
    if isinstance(student_probs, ProbMap):
        student_probs = student_probs.probs
    if isinstance(teacher_probs, ProbMap):
        teacher_probs = teacher_probs.probs
    if tuple(student_probs.shape) != tuple(teacher_probs.shape):
        raise ValueError(f"shape mismatch: {tuple(student_probs.shape)} vs {tuple(teacher_probs.shape)}")
    if isinstance(student_probs, torch.Tensor):
        return torch.mean((student_probs - teacher_probs) ** 2)
    d = np.asarray(student_probs, dtype=np.float64) - np.asarray(teacher_probs, dtype=np.float64)
    return float(np.mean(d * d))


def consistency_weight(step: int, ramp_steps: int, w_max: float = 1.0) -> float:
    """Sigmoid-shaped ramp: w_max * exp(-5 (1 - step/ramp_steps)^2) until ramp_steps, then w_max."""
    if ramp_steps <= 0 or step >= ramp_steps:
        return float(w_max)
    phase = 1.0 - step / ramp_steps
    return float(w_max * math.exp(-5.0 * phase * phase))


@dataclass
class MtConfig:
    epochs: int = 3
    lr: float = 5e-5
    weight_decay: float = 1e-4
    ema_alpha: float = 0.99
    w_max: float = 1.0
    ramp_fraction: float = 0.4
    smooth: float = 1e-5
    seed: int = 0
    max_steps_per_epoch: int | None = None


def train_mean_teacher(labeled_pseudo, unlabeled_real: Sequence[Volume], init: Checkpoint,
                       config: MtConfig | None = None, config_hash: str = "",
                       trace_hashes: bool = False) -> TrainResult:
    """Student/teacher training; returns the final teacher (student kept in `extra['student']`)."""
    cfg = config or MtConfig()
    pairs = _pairs(labeled_pseudo)
    unlabeled = list(unlabeled_real)
    if not pairs or not unlabeled:
        raise TrainingError("mean teacher needs both labelled pseudo images and unlabelled real images")
    if not 0.0 <= cfg.ema_alpha <= 1.0:
        raise ValueError(f"EMA decay must lie in [0, 1], got {cfg.ema_alpha}")
    rng = tu.seed_everything(cfg.seed)
    student = segmenter_from_checkpoint(init)
    teacher = segmenter_from_checkpoint(init)
    for p in teacher.parameters():
        p.requires_grad_(False)
    student.train()
    teacher.train()
    opt = tu.adam(student.parameters(), cfg.lr, cfg.weight_decay)

    steps_per_epoch = len(pairs) if not cfg.max_steps_per_epoch else min(len(pairs), cfg.max_steps_per_epoch)
    total = steps_per_epoch * cfg.epochs
    ramp = int(round(cfg.ramp_fraction * total))
    result = TrainResult(checkpoint=None)
    result.extra["optimizer"] = opt
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(pairs))[:steps_per_epoch]
        for idx in order:
            img, lab = pairs[idx]
            x_l = tu.to_tensor(img.voxels)
            oh = torch.from_numpy(one_hot(lab.labels)).unsqueeze(0)
            u = unlabeled[int(rng.integers(len(unlabeled)))]
            a = tu.to_tensor(augment_array(u.voxels, rng))  # student copy
            b = tu.to_tensor(augment_array(u.voxels, rng))  # teacher copy
            w = consistency_weight(step, ramp, cfg.w_max)

            dice_t, ce_t = dice_ce_terms(_forward_probs(student, x_l), oh, cfg.smooth)
            l_seg = dice_t + ce_t
            s_probs = _forward_probs(student, a)
            with torch.no_grad():
                t_probs = _forward_probs(teacher, b)
            l_con = consistency_loss(s_probs, t_probs)
            loss = l_seg + w * l_con
            tu.check_finite(loss, f"mean teacher step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            ema_update_module(teacher, student, cfg.ema_alpha)

            rec = {"stage": "mean_teacher", "epoch": epoch, "step": step, "w": w,
                   "l_seg": float(l_seg.detach()), "l_con": float(l_con.detach()),
                   "loss": float(loss.detach())}
            if trace_hashes:
                rec["teacher_hash"] = segmenter_checkpoint(teacher, init.arch, "mt_teacher", epoch).digest()
                rec["student_hash"] = segmenter_checkpoint(student, init.arch, "mt_student", epoch).digest()
            result.log.append(rec)
            step += 1
        log.info("mean teacher epoch %d done (%d steps)", epoch, step)
    result.checkpoint = segmenter_checkpoint(teacher, init.arch, "mt_teacher", cfg.epochs, config_hash)
    result.extra["student"] = segmenter_checkpoint(student, init.arch, "mt_student", cfg.epochs, config_hash)
    result.extra["teacher_module"] = teacher
    return result

