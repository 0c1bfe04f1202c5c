"""Segmentation network, dice + cross-entropy loss, supervised training and inference."""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import _torch_utils as tu
from .checkpoint import Checkpoint, from_modules
from .core_data import NUM_CLASSES, LabelMask, ProbMap, Volume, one_hot, validate_simplex
from .errors import TrainingError

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
STAGES = ("two_stage", "mt_student", "mt_teacher", "cutseg", "finetune_3d", "source_only")


def default_arch(base_width: int = 16, convs_per_block: int = 2) -> dict:
    return {"kind": "segmenter", "levels": 3, "base_width": base_width, "in_channels": 1,
            "num_classes": NUM_CLASSES, "convs_per_block": convs_per_block,
            "norm": "instance", "activation": "leaky_relu"}


def _block(cin, cout, n_convs):
    layers = []
    for i in range(n_convs):
        layers += [nn.Conv3d(cin if i == 0 else cout, cout, 3, padding=1),
                   nn.InstanceNorm3d(cout, affine=True), nn.LeakyReLU(0.01)]
    return nn.Sequential(*layers)


class UNet3D(nn.Module):
    """Three-level encoder-decoder with skip connections; returns class logits."""

    def __init__(self, base_width=16, in_channels=1, num_classes=NUM_CLASSES, convs_per_block=2, **_):
        super().__init__()
        w = base_width
        self.enc1 = _block(in_channels, w, convs_per_block)
        self.enc2 = _block(w, 2 * w, convs_per_block)
        self.enc3 = _block(2 * w, 4 * w, convs_per_block)
        self.dec2 = _block(6 * w, 2 * w, convs_per_block)
        self.dec1 = _block(3 * w, w, convs_per_block)
        self.head = nn.Conv3d(w, num_classes, 1)

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool3d(e1, 2))
        e3 = self.enc3(F.max_pool3d(e2, 2))
        d2 = self.dec2(torch.cat([F.interpolate(e3, scale_factor=2, mode="nearest"), e2], 1))
        d1 = self.dec1(torch.cat([F.interpolate(d2, scale_factor=2, mode="nearest"), e1], 1))
        return self.head(d1)


SIZE_MULTIPLE = 4


def build_segmenter(arch: dict) -> UNet3D:
    if arch.get("kind") != "segmenter":
        raise ValueError(f"architecture {arch.get('kind')!r} is not a segmenter")
    return UNet3D(**arch)


def segmenter_from_checkpoint(ckpt: Checkpoint) -> UNet3D:
    net = build_segmenter(ckpt.arch)
    try:
        net.load_state_dict(ckpt.state_dict("net"))
    except RuntimeError as exc:
        raise ValueError(f"checkpoint parameters do not match the architecture: {exc}") from exc
    return net


def segmenter_checkpoint(net: UNet3D, arch: dict, stage: str, epoch: int, config_hash: str = "",
                         **extra) -> Checkpoint:
    meta = {"stage": stage, "epoch": int(epoch), "config_hash": config_hash, **extra}
    return from_modules(arch, meta, net=net)


# ---------------------------------------------------------------------------
# loss


def dice_ce_terms(probs: torch.Tensor, onehot: torch.Tensor, smooth: float = 1e-5):
    """(dice term, CE term) for probabilities/one-hot of shape (K, ...) or (B, K, ...)."""
    class_axis = 1 if probs.dim() == 5 else 0
    dims = [d for d in range(probs.dim()) if d != class_axis]
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    dice = ((2 * inter + smooth) / (denom + smooth)).mean()
    p_true = (probs * onehot).sum(class_axis).clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    ce = -torch.log(p_true).mean()
    return 1 - dice, ce


def dice_ce_loss(probs, target, smooth: float = 1e-5):
    """Dice averaged over all K classes (background included) plus mean voxelwise cross-entropy."""
    if isinstance(probs, ProbMap):
        probs = torch.from_numpy(probs.probs.astype(np.float64))
    elif not isinstance(probs, torch.Tensor):
        probs = torch.as_tensor(np.asarray(probs, dtype=np.float64))
    p = probs.detach().cpu().numpy()
    validate_simplex(p[0] if p.ndim == 5 else p)
    labels = target.labels if isinstance(target, LabelMask) else np.asarray(target)
    if tuple(labels.shape) != tuple(probs.shape[-3:]):
        raise ValueError(f"probability shape {tuple(probs.shape)} does not match labels {labels.shape}")
    oh = torch.from_numpy(one_hot(labels, probs.shape[-4])).to(probs.dtype)
    if probs.dim() == 5:
        oh = oh.unsqueeze(0)
    d, c = dice_ce_terms(probs, oh, smooth)
    return d + c


# ---------------------------------------------------------------------------
# training / inference


@dataclass
class SegTrainConfig:
    epochs: int = 6
    lr: float = 5e-4
    weight_decay: float = 1e-4
    batch_size: int = 1
    base_width: int = 16
    convs_per_block: int = 1
    smooth: float = 1e-5
    seed: int = 0
    intensity_augment: bool = True
    max_steps_per_epoch: int | None = None


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    epoch_checkpoints: list[Checkpoint] = field(default_factory=list)
    log: list[dict] = field(default_factory=list)
    epoch_log: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def _pairs(dataset) -> list[tuple[Volume, LabelMask]]:
    items = getattr(dataset, "items", dataset)
    pairs = []
    for item in items:
        if isinstance(item, tuple):
            pairs.append((item[0], item[1]))
        else:
            pairs.append((item.image, item.labels))
    return pairs


def _augment_array(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    from .mean_teacher import augment_array
    return augment_array(x, rng)


def _forward_probs(net, x: torch.Tensor) -> torch.Tensor:
    xp, sizes = tu.pad_to_multiple(x, SIZE_MULTIPLE)
    return tu.crop_to(torch.softmax(net(xp), dim=1), sizes)


def validation_dice(net, pairs) -> float:
    """Mean foreground Dice (VS and cochlea) of argmax predictions."""
    from .metrics import dice_score
    if not pairs:
        return float("nan")
    scores = []
    net.eval()
    with torch.no_grad():
        for img, lab in pairs:
            pred = torch.argmax(_forward_probs(net, tu.to_tensor(img.voxels))[0], 0).numpy()
            scores.append(np.mean([dice_score(pred, lab.labels, k) for k in (1, 2)]))
    net.train()
    return float(np.mean(scores))


def supervised_step(net, opt, img: np.ndarray, lab: np.ndarray, smooth: float):
    x = tu.to_tensor(img)
    oh = torch.from_numpy(one_hot(lab)).unsqueeze(0)
    probs = _forward_probs(net, x)
    dice_t, ce_t = dice_ce_terms(probs, oh, smooth)
    loss = dice_t + ce_t
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss.detach()), float(dice_t.detach()), float(ce_t.detach())


def train_segmenter(pseudo_set, config: SegTrainConfig | None = None, validation=None,
                    init: Checkpoint | None = None, stage: str = "two_stage",
                    config_hash: str = "") -> TrainResult:
    """Supervised dice+CE training; returns the checkpoint with the best validation Dice.

    Without a validation set the final epoch is returned.
    """
    cfg = config or SegTrainConfig()
    pairs = _pairs(pseudo_set)
    if not pairs:
        raise TrainingError("cannot train a segmenter on an empty set")
    if cfg.batch_size != 1:
        raise ValueError("only batch size 1 is supported")
    val_pairs = _pairs(validation) if validation is not None else []
    rng = tu.seed_everything(cfg.seed)
    if init is not None:
        arch = dict(init.arch)
        net = segmenter_from_checkpoint(init)
    else:
        arch = default_arch(cfg.base_width, cfg.convs_per_block)
        net = build_segmenter(arch)
    net.train()
    opt = tu.adam(net.parameters(), cfg.lr, cfg.weight_decay)

    result = TrainResult(checkpoint=None)
    best_score, best_state, best_epoch = -np.inf, None, 0
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(pairs))
        if cfg.max_steps_per_epoch:
            order = order[:cfg.max_steps_per_epoch]
        dice_terms, losses = [], []
        for idx in order:
            img, lab = pairs[idx]
            x = img.voxels
            if cfg.intensity_augment:
                x = _augment_array(x, rng)
            loss, dice_t, ce_t = supervised_step(net, opt, x, lab.labels, cfg.smooth)
            tu.check_finite(loss, f"{stage} epoch {epoch}")
            step += 1
            result.log.append({"stage": stage, "epoch": epoch, "step": step, "loss": loss,
                               "dice_term": dice_t, "ce_term": ce_t})
            dice_terms.append(dice_t)
            losses.append(loss)
        val = validation_dice(net, val_pairs) if val_pairs else float("nan")
        score = val if val_pairs else epoch  # no validation -> last epoch wins
        rec = {"stage": stage, "epoch": epoch, "loss": float(np.mean(losses)),
               "dice_term": float(np.mean(dice_terms)), "val_dice": val,
               "seconds": time.perf_counter() - t0}
        result.epoch_log.append(rec)
        log.info("%s epoch %d loss %.4f val dice %.4f", stage, epoch, rec["loss"], val)
        if score > best_score:
            best_score, best_state, best_epoch = score, copy.deepcopy(net.state_dict()), epoch
    net.load_state_dict(best_state)
    result.checkpoint = segmenter_checkpoint(net, arch, stage, best_epoch, config_hash,
                                             val_dice=None if not val_pairs else float(best_score))
    return result


def predict_probs(ckpt: Checkpoint | nn.Module, v: Volume) -> ProbMap:
    net = segmenter_from_checkpoint(ckpt) if isinstance(ckpt, Checkpoint) else ckpt
    was_training = net.training
    net.eval()
    with torch.no_grad():
        probs = _forward_probs(net, tu.to_tensor(v.voxels))[0].numpy().astype(np.float32)
    net.train(was_training)
    return ProbMap(probs, v.spacing, v.case_id)


def predict_labels(ckpt, v: Volume) -> LabelMask:
    return predict_probs(ckpt, v).argmax()


def dataset_dice(ckpt, pairs: Sequence[tuple[Volume, LabelMask]]) -> float:
    net = segmenter_from_checkpoint(ckpt) if isinstance(ckpt, Checkpoint) else ckpt
    return validation_dice(net, list(pairs))
