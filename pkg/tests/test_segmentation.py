import numpy as np
import pytest
import torch

from udaseg.checkpoint import from_modules, load_checkpoint, save_checkpoint
from udaseg.core_data import Volume
from udaseg.errors import SvolError, TrainingError
from udaseg.metrics import dice_score
from udaseg.segmentation import (SegTrainConfig, build_segmenter, dataset_dice, default_arch, predict_labels,
                                 predict_probs, train_segmenter)

SMALL = dict(base_width=4, convs_per_block=1)


def _random_ckpt(seed=0, width=4):
    torch.manual_seed(seed)
    arch = default_arch(width, 1)
    return from_modules(arch, {"stage": "two_stage", "epoch": 0}, net=build_segmenter(arch))


def test_defaults():
    cfg = SegTrainConfig()
    assert cfg.batch_size == 1
    assert cfg.lr == 5e-4 and cfg.weight_decay == 1e-4


def test_predict_probs_simplex_and_padding():
    ckpt = _random_ckpt()
    v = Volume(np.random.default_rng(0).random((7, 9, 10)))
    p = predict_probs(ckpt, v)
    assert p.shape == (7, 9, 10) and p.num_classes == 3
    np.testing.assert_allclose(p.probs.sum(0), 1.0, atol=1e-5)
    assert predict_labels(ckpt, v).shape == v.shape


def test_predict_is_pure():
    ckpt = _random_ckpt(1)
    v = Volume(np.random.default_rng(1).random((8, 8, 8)))
    a, b = predict_probs(ckpt, v), predict_probs(ckpt, v)
    assert a.probs.tobytes() == b.probs.tobytes()


def test_arch_mismatch_rejected():
    ckpt = _random_ckpt()
    ckpt.arch = default_arch(8, 1)
    with pytest.raises(ValueError):
        predict_probs(ckpt, Volume(np.zeros((4, 4, 4)) + np.arange(4)))


def test_training_errors(rois16):
    with pytest.raises(TrainingError):
        train_segmenter([], SegTrainConfig(**SMALL))
    with pytest.raises(ValueError):
        train_segmenter([rois16[0][:2]], SegTrainConfig(batch_size=2, **SMALL))


def test_training_deterministic(rois16):
    pairs = [(s, lab) for s, lab, _ in rois16[:3]]
    cfg = SegTrainConfig(epochs=2, seed=4, **SMALL)
    a, b = train_segmenter(pairs, cfg), train_segmenter(pairs, cfg)
    assert a.checkpoint.digest() == b.checkpoint.digest()
    assert len(a.epoch_log) == 2 and len(a.log) == 6


@pytest.mark.slow
def test_training_improves_and_generalises(rois16):
    pairs = [(s, lab) for s, lab, _ in rois16]
    train, held_out = pairs[:5], pairs[5:]
    res = train_segmenter(train, SegTrainConfig(epochs=20, base_width=8, seed=0, intensity_augment=False),
                          validation=train)
    dice_terms = [r["dice_term"] for r in res.epoch_log]
    best = res.checkpoint.meta["epoch"]
    assert dice_terms[best - 1] < dice_terms[0]
    img, lab = held_out[0]
    assert dice_score(predict_labels(res.checkpoint, img), lab, 1) > 0.5
    assert dataset_dice(res.checkpoint, held_out) > 0.3


def test_best_checkpoint_selected_by_validation(rois16):
    pairs = [(s, lab) for s, lab, _ in rois16[:3]]
    res = train_segmenter(pairs, SegTrainConfig(epochs=3, seed=0, **SMALL), validation=pairs[:1])
    vals = [r["val_dice"] for r in res.epoch_log]
    assert res.checkpoint.meta["epoch"] == int(np.argmax(vals)) + 1
    assert res.checkpoint.meta["val_dice"] == pytest.approx(max(vals))


# ---------------------------------------------------------------------------
# checkpoint format


def test_checkpoint_roundtrip(tmp_path):
    ckpt = _random_ckpt(2)
    digest = save_checkpoint(ckpt, tmp_path / "c")
    back = load_checkpoint(tmp_path / "c")
    assert back.digest() == ckpt.digest() == digest
    assert back.arch == ckpt.arch and back.meta == ckpt.meta
    for k in ckpt.params:
        assert back.params[k].tobytes() == ckpt.params[k].tobytes()
    manifest = (tmp_path / "c.json").read_text()
    assert "net.enc1.0.weight" in manifest


def test_checkpoint_malformed(tmp_path):
    save_checkpoint(_random_ckpt(), tmp_path / "c")
    raw = (tmp_path / "c.bin").read_bytes()
    (tmp_path / "c.bin").write_bytes(raw[:-4])
    with pytest.raises(SvolError):
        load_checkpoint(tmp_path / "c")
    with pytest.raises(SvolError):
        load_checkpoint(tmp_path / "nothing")
