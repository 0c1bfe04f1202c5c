import pytest

from udaseg.atlas_roi import TranslationTransform, crop_roi, roi_box_around
from udaseg.phantom import generate_case


def phantom_rois(n, size=16, first_seed=0):
    """(source ROI, label ROI, target ROI) triples cropped around each phantom's own foreground."""
    out = []
    for seed in range(first_seed, first_seed + n):
        case = generate_case(seed)
        box = roi_box_around(case.gt_mask, size)
        t = TranslationTransform((0, 0, 0))
        out.append(tuple(crop_roi(v, t, box)[0] for v in (case.source_image, case.gt_mask, case.target_image)))
    return out


@pytest.fixture(scope="session")
def rois16():
    return phantom_rois(6, 16)


TINY_PIPELINE = {
    "data": {"n_cases": 4, "n_test": 2},
    "roi": {"size": 16},
    "translation": {
        "cyclegan2d": {"epochs": 2, "max_steps_per_epoch": 2, "base_width": 4, "disc_width": 4},
        "cyclegan3d": {"epochs": 2, "max_steps_per_epoch": 2, "base_width": 4, "disc_width": 4},
        "cut": {"base_width": 4, "disc_width": 4, "max_steps_per_epoch": 2, "num_patches": 16, "proj_dim": 8},
        "harvest_last": 1,
    },
    "segmentation": {"epochs": 1, "max_steps_per_epoch": 2, "base_width": 4},
    "mean_teacher": {"epochs": 1, "max_steps_per_epoch": 2},
    "finetune": {"epochs": 1, "max_steps_per_epoch": 2},
    "cutseg": {"pretrain_epochs": 1, "train": {"epochs": 1, "max_steps_per_epoch": 2, "seg_base_width": 4}},
    "baseline": {"epochs": 1},
}


def tiny_config(**over):
    from udaseg.config import from_dict
    cfg = from_dict(TINY_PIPELINE)
    for k, v in over.items():
        setattr(cfg, k, v)
    cfg.sync_seeds()
    return cfg


# ---------------------------------------------------------------------------
# acceptance bookkeeping: one PASS/FAIL line per criterion in the terminal summary

ACCEPTANCE: list[tuple[str, bool, str]] = []


class criterion:
    def __init__(self, name):
        self.name = name
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        detail = self.detail if ok else f"{exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        ACCEPTANCE.append((self.name, ok, detail))
        print(f"[{'PASS' if ok else 'FAIL'}] {self.name}  {detail}")
        return False


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}  {detail}".rstrip())
