"""Unpaired source->target translation training (CUT, 2D and 3D CycleGAN) and inference."""
from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .. import _torch_utils as tu
from ..checkpoint import Checkpoint, from_modules
from ..core_data import LabelMask, Volume
from ..errors import TrainingError
from .losses import adversarial_loss, cycle_consistency_loss, patchnce_loss
from .networks import (SIZE_MULTIPLE, PatchDiscriminator, PatchProjector, ResidualGenerator,
                       discriminator_arch, generator_arch)

log = logging.getLogger(__name__)

MODES = ("cut", "cyclegan2d", "cyclegan3d")
HIST_BINS = 32


@dataclass
class TranslationConfig:
    epochs: int = 5
    lr: float = 2e-4
    d_lr_mult: float = 4.0  # discriminators step faster than generators
    beta1: float = 0.5
    base_width: int = 16
    n_res: int = 2
    disc_width: int = 16
    lambda_cycle: float = 10.0
    lambda_identity: float = 5.0
    lambda_nce: float = 1.0
    nce_identity: bool = True
    num_patches: int = 64
    temperature: float = 0.07
    proj_dim: int = 64
    slices_per_step: int = 8
    seed: int = 0
    max_steps_per_epoch: int | None = None
    harvest_last: int = 3


@dataclass
class TranslationResult:
    checkpoints: list[Checkpoint] = field(default_factory=list)
    log: list[dict] = field(default_factory=list)
    epoch_log: list[dict] = field(default_factory=list)

    @property
    def final(self) -> Checkpoint:
        return self.checkpoints[-1]


def translator_arch(mode: str, cfg: TranslationConfig) -> dict:
    dim = 2 if mode == "cyclegan2d" else 3
    arch = {"kind": "translator", "mode": mode,
            "generator": generator_arch(dim, cfg.base_width, cfg.n_res),
            "discriminator": discriminator_arch(dim, cfg.disc_width)}
    if mode == "cut":
        arch["projector"] = {"in_channels": [cfg.base_width, 2 * cfg.base_width], "out_dim": cfg.proj_dim}
    return arch


def build_generator(arch: dict, identity: bool = False) -> ResidualGenerator:
    g = arch["generator"] if arch.get("kind") == "translator" else arch
    if g.get("kind") != "generator":
        raise ValueError(f"architecture {arch.get('kind')!r} holds no generator")
    return ResidualGenerator(**g, identity=identity)


def generator_from_checkpoint(ckpt: Checkpoint) -> ResidualGenerator:
    g = build_generator(ckpt.arch)
    try:
        g.load_state_dict(ckpt.state_dict("G"))
    except RuntimeError as exc:
        raise ValueError(f"checkpoint does not match its generator architecture: {exc}") from exc
    return g


def identity_generator_checkpoint(dim: int = 3, base_width: int = 16, mode: str | None = None) -> Checkpoint:
    mode = mode or ("cyclegan2d" if dim == 2 else "cyclegan3d")
    cfg = TranslationConfig(base_width=base_width)
    arch = translator_arch(mode, cfg)
    arch["generator"].update(dim=dim, residual=True)
    g = build_generator(arch, identity=True)
    return from_modules(arch, {"mode": mode, "epoch": 0, "variant": "identity"}, G=g)


def _run_generator(g: ResidualGenerator, x: torch.Tensor) -> torch.Tensor:
    xp, sizes = tu.pad_to_multiple(x, SIZE_MULTIPLE, spatial_dims=g.dim)
    return tu.crop_to(g(xp), sizes)


def translate(gen: Checkpoint | ResidualGenerator, v: Volume) -> Volume:
    """Map a volume into the target appearance; 2D generators run slice by slice along z."""
    g = generator_from_checkpoint(gen) if isinstance(gen, Checkpoint) else gen
    was_training = g.training
    g.eval()
    with torch.no_grad():
        if g.dim == 2:
            out = np.stack([_run_generator(g, tu.to_tensor(sl))[0, 0].numpy() for sl in v.voxels])
        elif g.dim == 3:
            out = _run_generator(g, tu.to_tensor(v.voxels))[0, 0].numpy()
        else:
            raise ValueError(f"unsupported generator dimensionality {g.dim}")
    g.train(was_training)
    return v.with_voxels(np.clip(out, 0.0, 1.0), domain_tag="pseudo_target")


def histogram_distance(translated: Sequence[Volume], targets: Sequence[Volume], bins: int = HIST_BINS) -> float:
    """L1 distance between pooled, normalised intensity histograms on [0, 1]."""
    def hist(vols):
        h = sum(np.histogram(np.clip(v.voxels, 0, 1), bins=bins, range=(0.0, 1.0))[0] for v in vols)
        return h / h.sum()
    return float(np.abs(hist(translated) - hist(targets)).sum())


# ---------------------------------------------------------------------------


def _sample_slices(vol: np.ndarray, n: int, rng) -> torch.Tensor:
    idx = np.sort(rng.choice(vol.shape[0], size=min(n, vol.shape[0]), replace=False))
    return torch.from_numpy(np.ascontiguousarray(vol[idx], dtype=np.float32)).unsqueeze(1)


def _batch(vol: Volume, dim: int, rng, n_slices: int) -> torch.Tensor:
    if dim == 2:
        return _sample_slices(vol.voxels, n_slices, rng)
    return tu.to_tensor(vol.voxels)


def _nce(g, proj, src, out, cfg, torch_gen):
    feats_q = g.encode(out)
    feats_k = [f.detach() for f in g.encode(src)]
    k, ids = proj(feats_k, cfg.num_patches, generator=torch_gen)
    q, _ = proj(feats_q, cfg.num_patches, patch_ids=ids)
    return sum(patchnce_loss(qi, ki.detach(), temperature=cfg.temperature) for qi, ki in zip(q, k)) / len(q)


class _CutModel:
    def __init__(self, cfg: TranslationConfig, arch: dict):
        self.cfg = cfg
        self.g = build_generator(arch)
        self.d = PatchDiscriminator(**arch["discriminator"])
        self.proj = PatchProjector(**arch["projector"])
        self.torch_gen = torch.Generator().manual_seed(cfg.seed)

    def load(self, ckpt: Checkpoint):
        self.g.load_state_dict(ckpt.state_dict("G"))
        self.d.load_state_dict(ckpt.state_dict("D"))
        self.proj.load_state_dict(ckpt.state_dict("F"))

    def gen_params(self):
        return itertools.chain(self.g.parameters(), self.proj.parameters())

    def losses(self, a, b):
        """Generator-side CUT loss terms for a source batch `a` and target batch `b`."""
        cfg = self.cfg
        fake = _run_generator(self.g, a)
        adv = adversarial_loss(None, self.d(fake), "generator")
        nce = _nce(self.g, self.proj, a, fake, cfg, self.torch_gen)
        if cfg.nce_identity:
            idt = _run_generator(self.g, b)
            nce = 0.5 * (nce + _nce(self.g, self.proj, b, idt, cfg, self.torch_gen))
        return fake, adv, nce

    def disc_loss(self, b, fake):
        return adversarial_loss(self.d(b), self.d(fake.detach()), "discriminator")

    def checkpoint(self, arch, meta):
        return from_modules(arch, meta, G=self.g, F=self.proj, D=self.d)


def _check_inputs(source_rois, target_rois):
    if not source_rois or not target_rois:
        raise TrainingError("translation needs non-empty source and target sets")


def train_translation(mode: str, source_rois: Sequence[Volume], target_rois: Sequence[Volume],
                      config: TranslationConfig | None = None, config_hash: str = "",
                      init: Checkpoint | None = None) -> TranslationResult:
    """Train one translation model; returns a checkpoint per epoch plus per-step loss records."""
    if mode not in MODES:
        raise ValueError(f"unknown translation mode {mode!r}")
    cfg = config or TranslationConfig()
    _check_inputs(source_rois, target_rois)
    rng = tu.seed_everything(cfg.seed)
    arch = translator_arch(mode, cfg)
    dim = arch["generator"]["dim"]
    betas = (cfg.beta1, 0.999)
    result = TranslationResult()

    if mode == "cut":
        model = _CutModel(cfg, arch)
        if init is not None:
            model.load(init)
        opt_g = tu.adam(model.gen_params(), cfg.lr, betas=betas)
        opt_d = tu.adam(model.d.parameters(), cfg.lr * cfg.d_lr_mult, betas=betas)
    else:
        g = build_generator(arch)
        g_inv = build_generator(arch)
        d_src = PatchDiscriminator(**arch["discriminator"])
        d_tgt = PatchDiscriminator(**arch["discriminator"])
        opt_g = tu.adam(itertools.chain(g.parameters(), g_inv.parameters()), cfg.lr, betas=betas)
        opt_d = tu.adam(itertools.chain(d_src.parameters(), d_tgt.parameters()), cfg.lr * cfg.d_lr_mult,
                        betas=betas)

    probe = list(source_rois[:4])
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(source_rois))
        if cfg.max_steps_per_epoch:
            order = order[:cfg.max_steps_per_epoch]
        recon = []
        for idx in order:
            a = _batch(source_rois[idx], dim, rng, cfg.slices_per_step)
            b = _batch(target_rois[int(rng.integers(len(target_rois)))], dim, rng, cfg.slices_per_step)
            if mode == "cut":
                fake, adv, nce = model.losses(a, b)
                loss_g = adv + cfg.lambda_nce * nce
                opt_g.zero_grad()
                loss_g.backward()
                opt_g.step()
                loss_d = model.disc_loss(b, fake)
                opt_d.zero_grad()
                loss_d.backward()
                opt_d.step()
                rec = {"adv": float(adv.detach()), "nce": float(nce.detach())}
            else:
                fake_b = _run_generator(g, a)
                fake_a = _run_generator(g_inv, b)
                rec_a = _run_generator(g_inv, fake_b)
                rec_b = _run_generator(g, fake_a)
                adv = (adversarial_loss(None, d_tgt(fake_b), "generator")
                       + adversarial_loss(None, d_src(fake_a), "generator"))
                cyc = cycle_consistency_loss(a, rec_a) + cycle_consistency_loss(b, rec_b)
                loss_g = adv + cfg.lambda_cycle * cyc
                idt = torch.zeros(())
                if cfg.lambda_identity > 0:
                    idt = (cycle_consistency_loss(b, _run_generator(g, b))
                           + cycle_consistency_loss(a, _run_generator(g_inv, a)))
                    loss_g = loss_g + cfg.lambda_identity * idt
                opt_g.zero_grad()
                loss_g.backward()
                opt_g.step()
                loss_d = (adversarial_loss(d_tgt(b), d_tgt(fake_b.detach()), "discriminator")
                          + adversarial_loss(d_src(a), d_src(fake_a.detach()), "discriminator"))
                opt_d.zero_grad()
                loss_d.backward()
                opt_d.step()
                rec = {"adv": float(adv.detach()), "cycle": float(cyc.detach()), "identity": float(idt.detach())}
                recon.append(rec["cycle"])
            rec.update({"mode": mode, "epoch": epoch, "step": step,
                        "loss_g": tu.check_finite(loss_g, f"{mode} generator step {step}"),
                        "loss_d": tu.check_finite(loss_d, f"{mode} discriminator step {step}")})
            result.log.append(rec)
            step += 1

        meta = {"mode": mode, "epoch": epoch, "config_hash": config_hash}
        if mode == "cut":
            ckpt = model.checkpoint(arch, meta)
            gen_for_probe = model.g
        else:
            ckpt = from_modules(arch, meta, G=g, Ginv=g_inv, D_src=d_src, D_tgt=d_tgt)
            gen_for_probe = g
        translated = [translate(gen_for_probe, v) for v in probe]
        erec = {"mode": mode, "epoch": epoch, "hist_distance": histogram_distance(translated, target_rois),
                "loss_g": float(np.mean([r["loss_g"] for r in result.log if r["epoch"] == epoch])),
                "seconds": time.perf_counter() - t0}
        if recon:
            erec["cycle"] = float(np.mean(recon))
        result.epoch_log.append(erec)
        result.checkpoints.append(ckpt)
        log.info("%s epoch %d: %s", mode, epoch, erec)
    return result


# ---------------------------------------------------------------------------


@dataclass
class PseudoSample:
    image: Volume
    labels: LabelMask
    provenance: dict


@dataclass
class PseudoTargetSet:
    items: list[PseudoSample] = field(default_factory=list)

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def extend(self, other: "PseudoTargetSet"):
        self.items.extend(other.items)


def synthesize(generators: Sequence[Checkpoint], source_rois: Sequence[Volume],
               labels: Sequence[LabelMask]) -> PseudoTargetSet:
    """Translate every source ROI with every generator, carrying the source label over unchanged."""
    out = PseudoTargetSet()
    for ckpt in generators:
        g = generator_from_checkpoint(ckpt)
        for v, lab in zip(source_rois, labels):
            if v.shape != lab.shape:
                raise ValueError(f"ROI {v.case_id} and its label differ in shape")
            pv = translate(g, v)
            out.items.append(PseudoSample(pv, lab, {"mode": ckpt.meta.get("mode"), "epoch": ckpt.meta.get("epoch"),
                                                    "case_id": v.case_id}))
    return out


def harvest(checkpoints: Sequence[Checkpoint], last: int = 3) -> list[Checkpoint]:
    return list(checkpoints[-last:]) if last > 0 else []
