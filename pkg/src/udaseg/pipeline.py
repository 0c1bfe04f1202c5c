"""Stage orchestration over a content-addressed workspace.

Each stage writes into ``<workspace>/<stage>/<key>/`` where the key hashes
the stage's own config section, the seed and the keys of its upstream stages.
Changing one section therefore invalidates only that stage and everything
downstream of it. A stage whose directory already holds a completion marker
for its key is skipped, which makes every stage resumable.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import shutil
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import _torch_utils as tu
from .atlas_roi import RoiBox, crop_bilateral, crop_roi, register_translation, roi_box_around
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PipelineConfig, config_hash, to_dict
from .core_data import (DatasetSplit, LabelMask, Volume, flip_lr, normalize_intensity, read_labels, read_probs,
                        read_volume, resample, write_labels, write_probs, write_volume)
from .errors import ConfigurationError, DependencyError, UndefinedMetricError
from .label_fusion import fuse_dataset
from .mean_teacher import train_mean_teacher
from .metrics import assd, dice_score
from .phantom import generate_case, generate_dataset, save_cases
from .postprocess import postprocess_mask
from .segmentation import SegTrainConfig, predict_probs, train_segmenter
from .translation.cutseg import CutSegConfig, resolution_route, train_cutseg
from .translation.train import PseudoSample, PseudoTargetSet, harvest, synthesize, train_translation

log = logging.getLogger(__name__)

DONE = "_done.json"
MODEL_NAMES = ("mt_teacher", "finetune_3d", "cutseg")
CLASS_IDS = {"VS": 1, "Cochlea": 2}


# ---------------------------------------------------------------------------
# small file helpers


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=False))


def _read_json(path: Path):
    return json.loads(Path(path).read_text())


def _write_jsonl(path: Path, records) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _clean(obj):
    """JSON-safe copy: non-finite floats become null."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def tree_digest(root: Path) -> str:
    """sha256 over relative paths and contents of every file below `root` except the marker."""
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != DONE:
            h.update(p.relative_to(root).as_posix().encode())
            h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


def _save_volumes(d: Path, vols: dict[str, Volume | LabelMask]) -> None:
    for name, v in vols.items():
        (write_labels if isinstance(v, LabelMask) else write_volume)(v, d / name)


# ---------------------------------------------------------------------------
# stage registry


@dataclass(frozen=True)
class Stage:
    name: str
    deps: tuple[str, ...]
    section: Callable[[PipelineConfig], dict]
    run: Callable


STAGES: dict[str, Stage] = {}


def _stage(name, deps, section):
    def register(fn):
        STAGES[name] = Stage(name, tuple(deps), section, fn)
        return fn
    return register


def stage_key(name: str, cfg: PipelineConfig, _memo=None) -> str:
    memo = {} if _memo is None else _memo
    if name in memo:
        return memo[name]
    st = STAGES[name]
    payload = {"stage": name, "seed": cfg.seed, "section": to_dict(st.section(cfg)),
               "upstream": {d: stage_key(d, cfg, memo) for d in st.deps}}
    memo[name] = config_hash(payload)[:16]
    return memo[name]


def stage_dir(workspace: Path, name: str, cfg: PipelineConfig) -> Path:
    return Path(workspace) / name / stage_key(name, cfg)


def is_complete(workspace: Path, name: str, cfg: PipelineConfig) -> bool:
    marker = stage_dir(workspace, name, cfg) / DONE
    return marker.is_file() and _read_json(marker).get("key") == stage_key(name, cfg)


def missing_upstream(workspace: Path, name: str, cfg: PipelineConfig) -> list[str]:
    """Upstream stages (transitively) whose outputs for this config are absent, in pipeline order."""
    seen, out = set(), []

    def visit(n):
        for d in STAGES[n].deps:
            if d in seen:
                continue
            seen.add(d)
            visit(d)
            if not is_complete(workspace, d, cfg):
                out.append(d)
    visit(name)
    order = list(STAGES)
    return sorted(out, key=order.index)


class RunManifest:
    """Per-workspace record of executed stages: keys, input/output digests, seeds and timings."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.data = _read_json(self.path) if self.path.is_file() else {"stages": {}, "history": []}

    def record(self, name: str, entry: dict) -> None:
        self.data["stages"][name] = entry
        self.data["history"].append({"stage": name, "key": entry["key"], "status": entry["status"]})
        _write_json(self.path, self.data)

    def entry(self, name: str) -> dict | None:
        return self.data["stages"].get(name)


def run_stage(name: str, cfg: PipelineConfig, workspace, force: bool = False) -> dict:
    """Run one stage (or reuse its outputs) and return its manifest entry."""
    if name not in STAGES:
        raise ConfigurationError(f"unknown stage {name!r}; choose from {list(STAGES)}")
    cfg.validate()
    workspace = Path(workspace)
    missing = missing_upstream(workspace, name, cfg)
    if missing:
        raise DependencyError(name, missing)
    if cfg.deterministic:
        tu.set_deterministic(True)
    manifest = RunManifest(workspace / "manifest.json")
    out = stage_dir(workspace, name, cfg)
    key = stage_key(name, cfg)
    inputs = {d: _read_json(stage_dir(workspace, d, cfg) / DONE)["digest"] for d in STAGES[name].deps}
    if is_complete(workspace, name, cfg) and not force:
        done = _read_json(out / DONE)
        entry = {"key": key, "status": "cached", "inputs": inputs, "digest": done["digest"], "seed": cfg.seed,
                 "seconds": 0.0, "dir": out.relative_to(workspace).as_posix()}
        manifest.record(name, entry)
        return entry
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    t0 = time.perf_counter()
    log.info("stage %s -> %s", name, out)
    STAGES[name].run(cfg, workspace, out)
    digest = tree_digest(out)
    _write_json(out / DONE, {"key": key, "digest": digest, "inputs": inputs})
    entry = {"key": key, "status": "ran", "inputs": inputs, "digest": digest, "seed": cfg.seed,
             "seconds": round(time.perf_counter() - t0, 3), "dir": out.relative_to(workspace).as_posix()}
    manifest.record(name, entry)
    return entry


PIPELINE_ORDER = ("phantom", "preprocess", "train-translate", "synthesize", "train-seg", "train-mt",
                  "finetune-3d", "train-cutseg", "predict", "fuse", "postprocess", "evaluate", "baseline")


def run_all(cfg: PipelineConfig, workspace, stages=PIPELINE_ORDER) -> dict:
    workspace = Path(workspace)
    for name in stages:
        run_stage(name, cfg, workspace)
    summary = summarize(cfg, workspace)
    _write_json(workspace / "summary.json", summary)
    return summary


def summarize(cfg: PipelineConfig, workspace) -> dict:
    """Pipeline vs. source-only mean Dice(VS); timings stay in the manifest."""
    workspace = Path(workspace)
    out = {"seed": cfg.seed, "config_hash": cfg.hash()}
    if is_complete(workspace, "evaluate", cfg):
        rep = _read_json(stage_dir(workspace, "evaluate", cfg) / "report.json")
        out["pipeline"] = rep["summary"]
        out["models"] = rep.get("models", {})
    if is_complete(workspace, "baseline", cfg):
        out["baseline"] = _read_json(stage_dir(workspace, "baseline", cfg) / "report.json")["summary"]
    if "pipeline" in out and "baseline" in out:
        out["gain_vs_dice"] = out["pipeline"]["VS"]["dice_mean"] - out["baseline"]["VS"]["dice_mean"]
    return out


# ---------------------------------------------------------------------------
# data access shared by stages


def _case_ids(manifest: dict) -> tuple[list[str], list[str], list[str]]:
    return manifest["split"]["training"], manifest["split"]["validation"], manifest.get("test", [])


def _load_roi_set(d: Path, ids, names) -> list[dict]:
    out = []
    for cid in ids:
        item = {"case_id": cid}
        for n in names:
            path = d / cid / n
            item[n] = read_labels(path) if n.endswith("label") else read_volume(path)
        out.append(item)
    return out


def _rois(cfg, workspace):
    d = stage_dir(workspace, "preprocess", cfg)
    meta = _read_json(d / "rois.json")
    train = _load_roi_set(d / "train", meta["training"], ("source", "source_label", "target"))
    val = _load_roi_set(d / "val", meta["validation"], ("source", "source_label"))
    test = _load_roi_set(d / "test", meta["test"], ("target", "target_label"))
    return train, val, test


def _load_ckpts(d: Path) -> list:
    return [load_checkpoint(p.with_suffix("")) for p in sorted(d.glob("epoch_*.json"))]


def _load_pseudo(d: Path) -> PseudoTargetSet:
    out = PseudoTargetSet()
    if not (d / "index.json").is_file():
        return out
    for entry in _read_json(d / "index.json"):
        out.items.append(PseudoSample(read_volume(d / entry["dir"] / "image"), read_labels(d / entry["dir"] / "label"),
                                      entry["provenance"]))
    return out


def _save_pseudo(d: Path, pseudo: PseudoTargetSet) -> None:
    index = []
    for i, item in enumerate(pseudo):
        sub = f"{i:04d}_{item.provenance['mode']}_e{item.provenance['epoch']:03d}_{item.provenance['case_id']}"
        write_volume(item.image, d / sub / "image")
        write_labels(item.labels, d / sub / "label")
        index.append({"dir": sub, "provenance": item.provenance})
    _write_json(d / "index.json", index)


def _pseudo_for(cfg, workspace, split: str, modes) -> PseudoTargetSet:
    d = stage_dir(workspace, "synthesize", cfg) / split
    full = _load_pseudo(d)
    return PseudoTargetSet([it for it in full if it.provenance["mode"] in modes])


def _seg_cfg(cfg: PipelineConfig, **over) -> SegTrainConfig:
    return dataclasses.replace(cfg.segmentation, seed=cfg.seed, **over)


def _save_train_result(out: Path, name: str, result) -> None:
    save_checkpoint(result.checkpoint, out / name)
    _write_jsonl(out / f"{name}.log.jsonl", _clean(result.log))
    _write_json(out / f"{name}.epochs.json", _clean([{k: v for k, v in r.items() if k != "seconds"}
                                                     for r in result.epoch_log]))


# ---------------------------------------------------------------------------
# stages


@_stage("phantom", (), lambda c: c.data)
def _run_phantom(cfg: PipelineConfig, workspace: Path, out: Path):
    data = cfg.data
    if data.source == "directory":
        root = Path(data.root)
        if not (root / "manifest.json").is_file():
            raise ConfigurationError(f"{root} has no manifest.json")
        shutil.copytree(root / "cases", out / "cases")
        shutil.copy(root / "manifest.json", out / "manifest.json")
        return
    params = data.phantom_params()
    cases, split = generate_dataset(data.n_cases, cfg.seed, params)
    test = [generate_case(cfg.seed + data.test_seed_offset + i, params) for i in range(data.n_test)]
    save_cases(out, cases + test, split,
               extra={"test": [c.case_id for c in test], "phantom_params": params.to_dict()})


def _preprocess_volume(v, cfg: PipelineConfig):
    if cfg.data.resample:
        v = resample(v, cfg.data.spacing_zyx(), mode="nearest" if isinstance(v, LabelMask) else "trilinear")
    return normalize_intensity(v) if isinstance(v, Volume) else v


@_stage("preprocess", ("phantom",), lambda c: {"data": {"target_spacing": c.data.target_spacing,
                                                         "resample": c.data.resample}, "roi": c.roi})
def _run_preprocess(cfg: PipelineConfig, workspace: Path, out: Path):
    src_dir = stage_dir(workspace, "phantom", cfg)
    manifest = _read_json(src_dir / "manifest.json")
    train_ids, val_ids, test_ids = _case_ids(manifest)

    def load(cid):
        d = src_dir / "cases" / cid
        return {"source": _preprocess_volume(read_volume(d / "source"), cfg),
                "target": _preprocess_volume(read_volume(d / "target"), cfg),
                "label": _preprocess_volume(read_labels(d / "gt"), cfg)}

    atlas_id = cfg.roi.atlas_case or train_ids[0]
    atlas = load(atlas_id)
    if cfg.roi.origin is not None:
        box = RoiBox(tuple(cfg.roi.origin), cfg.roi.size)
    else:
        box = roi_box_around(atlas["label"], cfg.roi.size)
    # one atlas image per domain: intensity-based matching does not work across contrasts
    atlases = {"source": atlas["source"], "target": atlas["target"]}
    transforms = {}

    def crop(case, cid, domain, with_label):
        t = register_translation(case[domain], atlases[domain], cfg.roi.radius)
        roi, padded = crop_roi(case[domain], t, box)
        rec = {"transform": t.to_dict(), "padded": bool(padded)}
        res = {domain: roi}
        if with_label:
            res[f"{domain}_label"] = crop_roi(case["label"], t, box)[0]
        if cfg.roi.bilateral:
            _, left = crop_bilateral(case[domain], atlases[domain], box, cfg.roi.radius)
            res[f"{domain}_left"] = left
        transforms.setdefault(cid, {})[domain] = rec
        return res

    for split, ids, spec in (("train", train_ids, (("source", True), ("target", False))),
                             ("val", val_ids, (("source", True), ("target", True))),
                             ("test", test_ids, (("target", True),))):
        for cid in ids:
            case = load(cid)
            vols = {}
            for domain, with_label in spec:
                vols.update(crop(case, cid, domain, with_label))
            _save_volumes(out / split / cid, vols)
    _write_json(out / "rois.json", {"atlas_case": atlas_id, "box": box.to_dict(), "training": train_ids,
                                    "validation": val_ids, "test": test_ids})
    _write_json(out / "transforms.json", _clean(transforms))


@_stage("train-translate", ("preprocess",), lambda c: {"cyclegan2d": c.translation.cyclegan2d,
                                                      "cyclegan3d": c.translation.cyclegan3d,
                                                      "cut": c.translation.cut,
                                                      "pretrain_epochs": c.cutseg.pretrain_epochs})
def _run_translate(cfg: PipelineConfig, workspace: Path, out: Path):
    train, _, _ = _rois(cfg, workspace)
    source = [it["source"] for it in train]
    target = [it["target"] for it in train]
    tr = cfg.translation
    key = config_hash({"translation": to_dict(tr)})[:16]
    for mode, tcfg in (("cyclegan2d", tr.cyclegan2d), ("cyclegan3d", tr.cyclegan3d),
                       ("cut", dataclasses.replace(tr.cut, epochs=cfg.cutseg.pretrain_epochs))):
        res = train_translation(mode, source, target, dataclasses.replace(tcfg, seed=cfg.seed), config_hash=key)
        for ck in res.checkpoints:
            save_checkpoint(ck, out / mode / f"epoch_{ck.meta['epoch']:03d}")
        _write_jsonl(out / mode / "log.jsonl", _clean(res.log))
        _write_json(out / mode / "epochs.json", _clean([{k: v for k, v in r.items() if k != "seconds"}
                                                        for r in res.epoch_log]))


@_stage("synthesize", ("train-translate",), lambda c: {"harvest_last": c.translation.harvest_last})
def _run_synthesize(cfg: PipelineConfig, workspace: Path, out: Path):
    train, val, _ = _rois(cfg, workspace)
    tdir = stage_dir(workspace, "train-translate", cfg)
    train_set, val_set = PseudoTargetSet(), PseudoTargetSet()
    for mode in ("cyclegan2d", "cyclegan3d"):
        ckpts = _load_ckpts(tdir / mode)
        train_set.extend(synthesize(harvest(ckpts, cfg.translation.harvest_last),
                                    [it["source"] for it in train], [it["source_label"] for it in train]))
        val_set.extend(synthesize(harvest(ckpts, 1), [it["source"] for it in val],
                                  [it["source_label"] for it in val]))
    _save_pseudo(out / "train", train_set)
    _save_pseudo(out / "val", val_set)


@_stage("train-seg", ("synthesize",), lambda c: {"segmentation": c.segmentation,
                                                 "pseudo_modes": c.translation.pseudo_modes})
def _run_train_seg(cfg: PipelineConfig, workspace: Path, out: Path):
    modes = cfg.translation.pseudo_modes
    res = train_segmenter(_pseudo_for(cfg, workspace, "train", modes), _seg_cfg(cfg),
                          validation=_pseudo_for(cfg, workspace, "val", modes), stage="two_stage",
                          config_hash=config_hash(to_dict(cfg.segmentation))[:16])
    _save_train_result(out, "two_stage", res)


@_stage("train-mt", ("train-seg", "synthesize", "preprocess"), lambda c: c.mean_teacher)
def _run_train_mt(cfg: PipelineConfig, workspace: Path, out: Path):
    train, _, _ = _rois(cfg, workspace)
    init = load_checkpoint(stage_dir(workspace, "train-seg", cfg) / "two_stage")
    pseudo = _pseudo_for(cfg, workspace, "train", cfg.translation.pseudo_modes)
    res = train_mean_teacher(pseudo, [it["target"] for it in train], init,
                             dataclasses.replace(cfg.mean_teacher, seed=cfg.seed),
                             config_hash=config_hash(to_dict(cfg.mean_teacher))[:16])
    _save_train_result(out, "mt_teacher", res)
    save_checkpoint(res.extra["student"], out / "mt_student")


@_stage("finetune-3d", ("train-mt", "synthesize"), lambda c: c.finetune)
def _run_finetune(cfg: PipelineConfig, workspace: Path, out: Path):
    init = load_checkpoint(stage_dir(workspace, "train-mt", cfg) / "mt_teacher")
    ft = cfg.finetune
    scfg = _seg_cfg(cfg, epochs=ft.epochs, lr=ft.lr, weight_decay=ft.weight_decay,
                    intensity_augment=ft.intensity_augment, max_steps_per_epoch=ft.max_steps_per_epoch)
    res = train_segmenter(_pseudo_for(cfg, workspace, "train", ("cyclegan3d",)), scfg,
                          validation=_pseudo_for(cfg, workspace, "val", ("cyclegan3d",)), init=init,
                          stage="finetune_3d", config_hash=config_hash(to_dict(ft))[:16])
    _save_train_result(out, "finetune_3d", res)


@_stage("train-cutseg", ("train-translate", "train-seg", "preprocess"), lambda c: c.cutseg.train)
def _run_cutseg(cfg: PipelineConfig, workspace: Path, out: Path):
    train, _, _ = _rois(cfg, workspace)
    pretrained = _load_ckpts(stage_dir(workspace, "train-translate", cfg) / "cut")[-1]
    reference = load_checkpoint(stage_dir(workspace, "train-seg", cfg) / "two_stage")
    ccfg = dataclasses.replace(cfg.cutseg.train, seed=cfg.seed)
    source = [(it["source"], it["source_label"]) for it in train]
    target = [it["target"] for it in train]
    chash = config_hash(to_dict(ccfg))[:16]
    gen, seg, res = train_cutseg(source, target, reference, ccfg, pretrained_cut=pretrained,
                                 translation_config=cfg.translation.cut, config_hash=chash)
    save_checkpoint(gen, out / "cutseg_generator")
    _save_train_result(out, "cutseg", res)
    routed = [v for v in target if resolution_route(v, ccfg.resolution_threshold_mm, ccfg.resolution_comparison)]
    info = {"routed_training_cases": [v.case_id for v in routed], "finetuned": False}
    if routed and ccfg.finetune_epochs > 0:
        fcfg = dataclasses.replace(ccfg, epochs=ccfg.finetune_epochs)
        _, fseg, fres = train_cutseg(source, routed, reference, fcfg, pretrained_cut=gen,
                                     translation_config=cfg.translation.cut, init_segmenter=seg,
                                     config_hash=chash, stage="cutseg_finetune")
        _save_train_result(out, "cutseg_finetune", fres)
        info["finetuned"] = True
    _write_json(out / "routing.json", info)


def _model_checkpoints(cfg, workspace):
    cdir = stage_dir(workspace, "train-cutseg", cfg)
    routing = _read_json(cdir / "routing.json")
    return {
        "mt_teacher": load_checkpoint(stage_dir(workspace, "train-mt", cfg) / "mt_teacher"),
        "finetune_3d": load_checkpoint(stage_dir(workspace, "finetune-3d", cfg) / "finetune_3d"),
        "cutseg": load_checkpoint(cdir / "cutseg"),
        "cutseg_finetune": load_checkpoint(cdir / "cutseg_finetune") if routing["finetuned"] else None,
    }


@_stage("predict", ("train-mt", "finetune-3d", "train-cutseg", "preprocess"), lambda c: {})
def _run_predict(cfg: PipelineConfig, workspace: Path, out: Path):
    _, _, test = _rois(cfg, workspace)
    models = _model_checkpoints(cfg, workspace)
    ccfg = cfg.cutseg.train
    routes = {}
    for it in test:
        v = it["target"]
        for name in ("mt_teacher", "finetune_3d"):
            write_probs(predict_probs(models[name], v), out / name / v.case_id)
        use_ft = models["cutseg_finetune"] is not None and resolution_route(
            v, ccfg.resolution_threshold_mm, ccfg.resolution_comparison)
        routes[v.case_id] = "cutseg_finetune" if use_ft else "cutseg"
        write_probs(predict_probs(models[routes[v.case_id]], v), out / "cutseg" / v.case_id)
    _write_json(out / "routing.json", routes)


def _test_ids(cfg, workspace):
    return _read_json(stage_dir(workspace, "preprocess", cfg) / "rois.json")["test"]


@_stage("fuse", ("predict",), lambda c: c.fusion)
def _run_fuse(cfg: PipelineConfig, workspace: Path, out: Path):
    pdir = stage_dir(workspace, "predict", cfg)
    ids = _test_ids(cfg, workspace)
    triples = [tuple(read_probs(pdir / m / cid) for m in MODEL_NAMES) for cid in ids]
    fused = fuse_dataset(triples, order=cfg.fusion.order, scope=cfg.fusion.scope)
    reports = {}
    for cid, (mask, reps) in zip(ids, fused):
        write_labels(mask, out / "masks" / cid)
        reports[cid] = [r.to_dict() for r in reps]
    _write_json(out / "reports.json", {"order": [MODEL_NAMES[i] for i in cfg.fusion.order],
                                       "scope": cfg.fusion.scope, "cases": _clean(reports)})


def _postprocess(mask: LabelMask, cfg: PipelineConfig) -> LabelMask:
    pp = cfg.postprocess
    return postprocess_mask(mask, pp.z_threshold, pp.connectivity, pp.z_sign)


@_stage("postprocess", ("fuse",), lambda c: c.postprocess)
def _run_postprocess(cfg: PipelineConfig, workspace: Path, out: Path):
    fdir = stage_dir(workspace, "fuse", cfg) / "masks"
    for cid in _test_ids(cfg, workspace):
        write_labels(_postprocess(read_labels(fdir / cid), cfg), out / "masks" / cid)


def _gt_dir(cfg, workspace, out: Path) -> Path:
    """Flat directory of ground-truth test masks (cropped with each case's target transform)."""
    pre = stage_dir(workspace, "preprocess", cfg)
    gt = out / "gt"
    for cid in _test_ids(cfg, workspace):
        write_labels(read_labels(pre / "test" / cid / "target_label"), gt / cid)
    return gt


@_stage("evaluate", ("postprocess", "predict", "preprocess"), lambda c: c.eval)
def _run_evaluate(cfg: PipelineConfig, workspace: Path, out: Path):
    gt = _gt_dir(cfg, workspace, out)
    report = evaluate_report(stage_dir(workspace, "postprocess", cfg) / "masks", gt, cfg)
    # each ensemble member on its own, post-processed the same way
    pdir = stage_dir(workspace, "predict", cfg)
    models = {}
    for name in MODEL_NAMES:
        mdir = out / "members" / name
        for cid in _test_ids(cfg, workspace):
            write_labels(_postprocess(read_probs(pdir / name / cid).argmax(), cfg), mdir / cid)
        models[name] = evaluate_report(mdir, gt, cfg)["summary"]
    report["models"] = models
    _write_json(out / "report.json", _clean(report))
    (out / "report.txt").write_text(render_table(report))


@_stage("baseline", ("preprocess",), lambda c: {"baseline": c.baseline, "segmentation_arch": {
    "base_width": c.segmentation.base_width, "convs_per_block": c.segmentation.convs_per_block},
    "postprocess": c.postprocess, "eval": c.eval})
def _run_baseline(cfg: PipelineConfig, workspace: Path, out: Path):
    """Source-only reference: segmenter trained on raw source ROIs, applied to target ROIs."""
    train, val, test = _rois(cfg, workspace)
    b = cfg.baseline
    scfg = _seg_cfg(cfg, epochs=b.epochs, lr=b.lr, weight_decay=b.weight_decay, intensity_augment=b.intensity_augment)
    res = train_segmenter([(it["source"], it["source_label"]) for it in train], scfg,
                          validation=[(it["source"], it["source_label"]) for it in val], stage="source_only",
                          config_hash=config_hash(to_dict(b))[:16])
    _save_train_result(out, "source_only", res)
    for it in test:
        mask = predict_probs(res.checkpoint, it["target"]).argmax()
        write_labels(_postprocess(mask, cfg), out / "masks" / it["case_id"])
    gt = _gt_dir(cfg, workspace, out)
    report = evaluate_report(out / "masks", gt, cfg)
    _write_json(out / "report.json", _clean(report))
    (out / "report.txt").write_text(render_table(report))


# ---------------------------------------------------------------------------
# evaluation report


def _mask_ids(d: Path) -> set[str]:
    return {p.stem for p in Path(d).glob("*.json")}


def evaluate_report(pred_dir, gt_dir, config: PipelineConfig | None = None) -> dict:
    """Per-case and mean ± std Dice and ASSD per class.

    Cases present on only one side are listed under "missing"; undefined ASSD
    values (empty surfaces) are null per case and excluded from the mean,
    with their count reported.
    """
    classes = config.eval.classes if config is not None else tuple(CLASS_IDS)
    pred_ids, gt_ids = _mask_ids(pred_dir), _mask_ids(gt_dir)
    common = sorted(pred_ids & gt_ids)
    per_case = []
    for cid in common:
        pred, gt = read_labels(Path(pred_dir) / cid), read_labels(Path(gt_dir) / cid)
        for cname in classes:
            k = CLASS_IDS[cname]
            try:
                dist = assd(pred, gt, k, gt.spacing)
            except UndefinedMetricError:
                dist = None
            per_case.append({"case_id": cid, "class": cname, "dice": dice_score(pred, gt, k), "assd_mm": dist})
    summary = {}
    for cname in classes:
        rows = [r for r in per_case if r["class"] == cname]
        dice = np.array([r["dice"] for r in rows], dtype=np.float64)
        dist = np.array([r["assd_mm"] for r in rows if r["assd_mm"] is not None], dtype=np.float64)
        summary[cname] = {
            "dice_mean": float(dice.mean()) if dice.size else None,
            "dice_std": float(dice.std()) if dice.size else None,
            "assd_mean": float(dist.mean()) if dist.size else None,
            "assd_std": float(dist.std()) if dist.size else None,
            "n": int(dice.size),
            "assd_undefined": int(len(rows) - dist.size),
        }
    return {"cases": per_case, "summary": summary,
            "missing": {"prediction": sorted(gt_ids - pred_ids), "ground_truth": sorted(pred_ids - gt_ids)}}


def _pm(mean, std) -> str:
    if mean is None:
        return "n/a"
    return f"{mean:.4f} ± {std:.4f}"


def render_table(report: dict) -> str:
    """Fixed-width text table: one row per class with Dice and ASSD as mean ± std."""
    lines = [f"{'':<10}{'Dice':<20}{'ASSD (mm)':<20}"]
    for cname, s in report["summary"].items():
        lines.append(f"{cname:<10}{_pm(s['dice_mean'], s['dice_std']):<20}{_pm(s['assd_mean'], s['assd_std']):<20}")
    miss = report.get("missing", {})
    if miss.get("prediction"):
        lines.append("missing predictions: " + ", ".join(miss["prediction"]))
    if miss.get("ground_truth"):
        lines.append("missing ground truth: " + ", ".join(miss["ground_truth"]))
    return "\n".join(lines) + "\n"


__all__ = ["STAGES", "PIPELINE_ORDER", "run_stage", "run_all", "stage_key", "stage_dir", "missing_upstream",
           "RunManifest", "evaluate_report", "render_table", "summarize", "tree_digest"]
