import numpy as np
import pytest
import torch

from udaseg.checkpoint import from_modules
from udaseg.core_data import LabelMask, Volume
from udaseg.errors import ConfigurationError, TrainingError
from udaseg.segmentation import build_segmenter, default_arch
from udaseg.translation import (CutSegConfig, TranslationConfig, harvest, histogram_distance,
                                identity_generator_checkpoint, resolution_route, synthesize, train_cutseg,
                                train_translation, translate)
from udaseg.translation.networks import PatchDiscriminator, PatchProjector, ResidualGenerator
from udaseg.translation.train import translator_arch

TINY = dict(base_width=4, disc_width=4, proj_dim=8, num_patches=16, slices_per_step=4)


def _data(rois, n=4):
    return [s for s, _, _ in rois[:n]], [t for _, _, t in rois[:n]]


# ---------------------------------------------------------------------------
# networks and translate


@pytest.mark.parametrize("dim", [2, 3])
def test_identity_generator(dim):
    v = Volume(np.random.default_rng(0).random((6, 12, 10)))
    out = translate(identity_generator_checkpoint(dim=dim, base_width=4), v)
    np.testing.assert_allclose(out.voxels, v.voxels, atol=1e-5)
    assert out.domain_tag == "pseudo_target"


@pytest.mark.parametrize("mode", ["cut", "cyclegan2d", "cyclegan3d"])
def test_translate_shape_and_range(mode):
    torch.manual_seed(0)
    arch = translator_arch(mode, TranslationConfig(base_width=4))
    g = ResidualGenerator(**arch["generator"])
    ckpt = from_modules(arch, {"mode": mode, "epoch": 1}, G=g)
    for shape in [(8, 8, 8), (5, 7, 9)]:
        v = Volume(np.random.default_rng(1).normal(0.5, 2.0, shape))
        out = translate(ckpt, v)
        assert out.shape == shape and out.voxels.min() >= 0 and out.voxels.max() <= 1


def test_residual_generator_output_clamped():
    torch.manual_seed(0)
    arch = translator_arch("cyclegan3d", TranslationConfig(base_width=4))
    arch["generator"]["residual"] = True
    ckpt = from_modules(arch, {"mode": "cyclegan3d"}, G=ResidualGenerator(**arch["generator"]))
    out = translate(ckpt, Volume(np.full((8, 8, 8), 5.0) + np.arange(8)))
    assert out.voxels.max() <= 1.0


def test_2d_mode_is_slicewise():
    torch.manual_seed(3)
    arch = translator_arch("cyclegan2d", TranslationConfig(base_width=4))
    ckpt = from_modules(arch, {"mode": "cyclegan2d"}, G=ResidualGenerator(**arch["generator"]))
    vol = np.random.default_rng(2).random((32, 12, 12))
    whole = translate(ckpt, Volume(vol)).voxels
    for z in range(32):
        single = translate(ckpt, Volume(vol[z:z + 1])).voxels[0]
        np.testing.assert_array_equal(whole[z], single)


def test_checkpoint_arch_mismatch():
    arch = translator_arch("cyclegan3d", TranslationConfig(base_width=4))
    ckpt = from_modules(arch, {}, G=ResidualGenerator(**arch["generator"]))
    ckpt.arch = translator_arch("cyclegan3d", TranslationConfig(base_width=8))
    with pytest.raises(ValueError):
        translate(ckpt, Volume(np.random.default_rng(0).random((8, 8, 8))))


def test_discriminator_and_projector_shapes():
    d = PatchDiscriminator(dim=3, base_width=4)
    assert d(torch.zeros(1, 1, 16, 16, 16)).shape[1] == 1
    proj = PatchProjector((4, 8), 8)
    feats = [torch.randn(1, 4, 4, 4, 4), torch.randn(1, 8, 2, 2, 2)]
    out, ids = proj(feats, 16, generator=torch.Generator().manual_seed(0))
    assert out[0].shape == (16, 8) and out[1].shape == (8, 8)
    np.testing.assert_allclose(out[0].norm(dim=1).detach().numpy(), 1.0, atol=1e-6)
    again, _ = proj(feats, 16, patch_ids=ids)
    assert torch.equal(again[0], out[0])


def test_histogram_distance():
    a = Volume(np.zeros((2, 2, 2)))
    b = Volume(np.ones((2, 2, 2)))
    assert histogram_distance([a], [a]) == 0.0
    assert histogram_distance([a], [b]) == pytest.approx(2.0)


# ---------------------------------------------------------------------------
# training


def test_train_translation_errors(rois16):
    src, tgt = _data(rois16)
    with pytest.raises(TrainingError):
        train_translation("cyclegan3d", [], tgt)
    with pytest.raises(ValueError):
        train_translation("unit", src, tgt)


@pytest.mark.parametrize("mode", ["cyclegan2d", "cyclegan3d", "cut"])
def test_train_translation_records_and_determinism(rois16, mode):
    src, tgt = _data(rois16)
    cfg = TranslationConfig(epochs=5, seed=0, max_steps_per_epoch=2, **TINY)
    a = train_translation(mode, src, tgt, cfg)
    b = train_translation(mode, src, tgt, cfg)
    assert len(a.epoch_log) == 5 and len(a.checkpoints) == 5
    assert [c.meta["epoch"] for c in a.checkpoints] == [1, 2, 3, 4, 5]
    assert len(a.log) == 10 and all("loss_g" in r and "loss_d" in r for r in a.log)
    assert [c.digest() for c in a.checkpoints] == [c.digest() for c in b.checkpoints]
    assert a.final.arch["mode"] == mode


@pytest.mark.slow
def test_cyclegan2d_reconstruction_improves(rois16):
    src, tgt = _data(rois16, 6)
    res = train_translation("cyclegan2d", src, tgt, TranslationConfig(epochs=6, seed=0, base_width=8, disc_width=8))
    assert res.epoch_log[-1]["cycle"] < res.epoch_log[0]["cycle"]


@pytest.mark.slow
def test_cut_histogram_distance_decreases(rois16):
    src, tgt = _data(rois16, 6)
    res = train_translation("cut", src, tgt, TranslationConfig(epochs=30, seed=0, base_width=8, disc_width=8))
    assert res.epoch_log[-1]["hist_distance"] < res.epoch_log[0]["hist_distance"]


def test_harvest_and_synthesize(rois16):
    src, tgt = _data(rois16, 3)
    labels = [lab for _, lab, _ in rois16[:3]]
    res = train_translation("cyclegan3d", src, tgt, TranslationConfig(epochs=4, max_steps_per_epoch=1, **TINY))
    picked = harvest(res.checkpoints, 3)
    assert [c.meta["epoch"] for c in picked] == [2, 3, 4]
    assert harvest(res.checkpoints, 0) == []
    pseudo = synthesize(picked, src, labels)
    assert len(pseudo) == 9
    for item in pseudo:
        assert item.image.domain_tag == "pseudo_target"
        assert item.provenance["mode"] == "cyclegan3d" and item.provenance["epoch"] in (2, 3, 4)
        lab = labels[[v.case_id for v in src].index(item.provenance["case_id"])]
        assert item.labels is lab and item.image.shape == lab.shape
    with pytest.raises(ValueError):
        synthesize(picked[:1], src[:1], [LabelMask(np.zeros((2, 2, 2), np.uint8))])


# ---------------------------------------------------------------------------
# CutSeg


def _reference(seed=0):
    torch.manual_seed(seed)
    arch = default_arch(4, 1)
    return from_modules(arch, {"stage": "two_stage", "epoch": 1}, net=build_segmenter(arch))


def _cut_pretrained(rois):
    src, tgt = _data(rois)
    return train_translation("cut", src, tgt, TranslationConfig(epochs=1, max_steps_per_epoch=1, **TINY)).final


def test_cutseg_requires_pretrained_cut(rois16):
    src = [(s, lab) for s, lab, _ in rois16[:2]]
    tgt = [t for _, _, t in rois16[:2]]
    cfg = CutSegConfig(epochs=1, seg_base_width=4)
    with pytest.raises(ConfigurationError):
        train_cutseg(src, tgt, _reference(), cfg)
    wrong = identity_generator_checkpoint(dim=3, base_width=4)
    with pytest.raises(ConfigurationError):
        train_cutseg(src, tgt, _reference(), cfg, pretrained_cut=wrong)


def test_cutseg_deterministic(rois16):
    src = [(s, lab) for s, lab, _ in rois16[:4]]
    tgt = [t for _, _, t in rois16[:4]]
    pre = _cut_pretrained(rois16)
    cfg = CutSegConfig(epochs=3, seg_base_width=4, max_steps_per_epoch=2)
    tcfg = TranslationConfig(**TINY)
    g1, s1, r1 = train_cutseg(src, tgt, _reference(), cfg, pretrained_cut=pre, translation_config=tcfg)
    g2, s2, r2 = train_cutseg(src, tgt, _reference(), cfg, pretrained_cut=pre, translation_config=tcfg)
    assert g1.digest() == g2.digest() and s1.digest() == s2.digest()
    assert len(r1.epoch_checkpoints) == 3 and s1.meta["stage"] == "cutseg"
    assert {"l_seg", "l_mae", "adv", "nce"} <= set(r1.log[0])


@pytest.mark.slow
def test_cutseg_segmentation_loss_decreases(rois16):
    src = [(s, lab) for s, lab, _ in rois16]
    tgt = [t for _, _, t in rois16]
    pre = train_translation("cut", [s for s, _ in src], tgt,
                            TranslationConfig(epochs=3, base_width=8, disc_width=8)).final
    _, _, res = train_cutseg(src, tgt, _reference(), CutSegConfig(epochs=4, seg_base_width=8), pretrained_cut=pre)
    assert res.epoch_log[-1]["l_seg"] < res.epoch_log[0]["l_seg"]


def test_resolution_route_directions():
    fine = Volume(np.zeros((2, 2, 2)), (1.5, 0.46875, 0.46875))
    coarse = Volume(np.zeros((2, 2, 2)), (1.5, 0.6, 0.6))
    assert not resolution_route(fine, 0.5, "spacing_gt") and resolution_route(coarse, 0.5, "spacing_gt")
    assert resolution_route(fine, 0.5, "spacing_lt") and not resolution_route(coarse, 0.5, "spacing_lt")
    with pytest.raises(ConfigurationError):
        resolution_route(fine, 0.5, "bigger")
