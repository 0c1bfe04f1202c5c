"""End-to-end CUT translation with a segmentation head trained on the synthesized images."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .. import _torch_utils as tu
from ..checkpoint import Checkpoint
from ..core_data import LabelMask, Volume, one_hot
from ..errors import ConfigurationError, TrainingError
from ..segmentation import (TrainResult, _forward_probs, build_segmenter, default_arch, dice_ce_terms,
                            predict_probs, segmenter_checkpoint, segmenter_from_checkpoint)
from .losses import mae_loss
from .train import TranslationConfig, _CutModel, _run_generator

log = logging.getLogger(__name__)


@dataclass
class CutSegConfig:
    epochs: int = 3
    lr: float = 2e-4
    weight_decay: float = 1e-4
    lambda_seg: float = 1.0
    lambda_mae: float = 1.0
    seg_base_width: int = 16
    seg_convs_per_block: int = 1
    smooth: float = 1e-5
    seed: int = 0
    finetune_epochs: int = 1
    resolution_threshold_mm: float = 0.5
    resolution_comparison: str = "spacing_gt"
    real_data_epochs: int = 82  # schedule used on clinical data; not used at desk scale
    max_steps_per_epoch: int | None = None


def in_plane_spacing(v: Volume) -> float:
    return max(v.spacing[1], v.spacing[2])


def resolution_route(v: Volume, threshold_mm: float = 0.5, comparison: str = "spacing_gt") -> bool:
    """Whether `v` falls in the resolution band the fine-tuned CutSeg model handles.

    "spacing_gt" selects in-plane spacing above the threshold, "spacing_lt"
    below it; the wording this rule comes from does not pin the direction.
    """
    s = in_plane_spacing(v)
    if comparison == "spacing_gt":
        return s > threshold_mm
    if comparison == "spacing_lt":
        return s < threshold_mm
    raise ConfigurationError(f"unknown resolution comparison {comparison!r}")


def train_cutseg(source_labeled: Sequence[tuple[Volume, LabelMask]], target_unlabeled: Sequence[Volume],
                 reference_predictor: Checkpoint, config: CutSegConfig | None = None,
                 pretrained_cut: Checkpoint | None = None, translation_config: TranslationConfig | None = None,
                 init_segmenter: Checkpoint | None = None, config_hash: str = "",
                 stage: str = "cutseg") -> tuple[Checkpoint, Checkpoint, TrainResult]:
    """Returns (translator checkpoint, segmenter checkpoint, training record) after the last epoch."""
    cfg = config or CutSegConfig()
    if pretrained_cut is None:
        raise ConfigurationError("CutSeg needs pretrained CUT weights (run CUT translation training first)")
    if pretrained_cut.arch.get("mode") != "cut":
        raise ConfigurationError(f"pretrained checkpoint is a {pretrained_cut.arch.get('mode')!r} model, not CUT")
    if not source_labeled or not target_unlabeled:
        raise TrainingError("CutSeg needs labelled source and unlabelled target images")
    tcfg = translation_config or TranslationConfig()
    tcfg = TranslationConfig(**{**tcfg.__dict__, "seed": cfg.seed,
                                "base_width": pretrained_cut.arch["generator"]["base_width"],
                                "n_res": pretrained_cut.arch["generator"]["n_res"],
                                "disc_width": pretrained_cut.arch["discriminator"]["base_width"],
                                "proj_dim": pretrained_cut.arch["projector"]["out_dim"]})
    rng = tu.seed_everything(cfg.seed)
    model = _CutModel(tcfg, pretrained_cut.arch)
    model.load(pretrained_cut)
    if init_segmenter is not None:
        seg_arch = dict(init_segmenter.arch)
        seg = segmenter_from_checkpoint(init_segmenter)
    else:
        seg_arch = default_arch(cfg.seg_base_width, cfg.seg_convs_per_block)
        seg = build_segmenter(seg_arch)  # trained from scratch
    seg.train()

    refs = [torch.from_numpy(predict_probs(reference_predictor, v).probs).unsqueeze(0) for v in target_unlabeled]
    betas = (tcfg.beta1, 0.999)
    opt_g = torch.optim.Adam([
        {"params": list(model.gen_params()), "weight_decay": 0.0},
        {"params": list(seg.parameters()), "weight_decay": cfg.weight_decay},
    ], lr=cfg.lr, betas=betas)
    opt_d = tu.adam(model.d.parameters(), cfg.lr * tcfg.d_lr_mult, betas=betas)

    result = TrainResult(checkpoint=None)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(source_labeled))
        if cfg.max_steps_per_epoch:
            order = order[:cfg.max_steps_per_epoch]
        seg_losses = []
        for idx in order:
            img, lab = source_labeled[idx]
            ti = int(rng.integers(len(target_unlabeled)))
            a = tu.to_tensor(img.voxels)
            b = tu.to_tensor(target_unlabeled[ti].voxels)
            oh = torch.from_numpy(one_hot(lab.labels)).unsqueeze(0)

            fake, adv, nce = model.losses(a, b)
            dice_t, ce_t = dice_ce_terms(_forward_probs(seg, fake.clamp(0, 1)), oh, cfg.smooth)
            l_seg = dice_t + ce_t
            l_mae = mae_loss(_forward_probs(seg, b), refs[ti])
            loss = adv + tcfg.lambda_nce * nce + cfg.lambda_seg * l_seg + cfg.lambda_mae * l_mae
            tu.check_finite(loss, f"{stage} step {step}")
            opt_g.zero_grad()
            loss.backward()
            opt_g.step()
            loss_d = model.disc_loss(b, fake)
            tu.check_finite(loss_d, f"{stage} discriminator step {step}")
            opt_d.zero_grad()
            loss_d.backward()
            opt_d.step()
            rec = {"stage": stage, "epoch": epoch, "step": step, "loss": float(loss.detach()),
                   "adv": float(adv.detach()), "nce": float(nce.detach()), "l_seg": float(l_seg.detach()),
                   "l_mae": float(l_mae.detach()), "loss_d": float(loss_d.detach())}
            result.log.append(rec)
            seg_losses.append(rec["l_seg"])
            step += 1
        erec = {"stage": stage, "epoch": epoch, "l_seg": float(np.mean(seg_losses)),
                "seconds": time.perf_counter() - t0}
        result.epoch_log.append(erec)
        log.info("%s epoch %d: %s", stage, epoch, erec)
        meta = {"mode": "cutseg", "epoch": epoch, "config_hash": config_hash}
        result.epoch_checkpoints.append(segmenter_checkpoint(seg, seg_arch, stage, epoch, config_hash))
        gen_ckpt = model.checkpoint({**pretrained_cut.arch, "mode": "cut"}, meta)
    seg_ckpt = result.epoch_checkpoints[-1]
    result.checkpoint = seg_ckpt
    return gen_ckpt, seg_ckpt, result


def segment_with_generator(gen: Checkpoint, seg: Checkpoint, v: Volume):
    """Segmentation of a (source-like) volume through the generator, as seen during training."""
    from .train import generator_from_checkpoint
    g = generator_from_checkpoint(gen)
    with torch.no_grad():
        x = _run_generator(g, tu.to_tensor(v.voxels)).clamp(0, 1)[0, 0].numpy()
    return predict_probs(seg, v.with_voxels(x, domain_tag="pseudo_target"))


__all__ = ["CutSegConfig", "train_cutseg", "resolution_route", "in_plane_spacing", "segment_with_generator"]
