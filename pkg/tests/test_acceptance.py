"""Acceptance run: each test covers one criterion and records a PASS/FAIL line.

The lines are printed as they happen (visible with ``-s``) and again in the
"acceptance criteria" section of the terminal summary. The adaptation-gain and
determinism criteria run the full default pipeline (four runs in total, about
15 minutes each on one core) and are marked slow.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest

import test_atlas_roi as reg
import test_label_fusion as fus
import test_losses as losses
import test_mean_teacher as mt
import test_metrics_postprocess as mp
from conftest import criterion
from udaseg import cli
from udaseg.config import PipelineConfig
from udaseg.core_data import Volume, flip_lr
from udaseg.pipeline import render_table, stage_dir, tree_digest

ROOT = Path(__file__).resolve().parents[1]

# published challenge results (VS, cochlea): Dice mean ± std, ASSD mean in mm
PUBLISHED = {"VS": (0.8302, 0.0772, 0.5686), "Cochlea": (0.8220, 0.0310, 0.1829)}

GAIN_MARGIN = 0.15
RUNTIME_LIMIT_S = 30 * 60
SEEDS = (0, 1, 2)


def test_published_table_not_reproduced():
    with criterion("published leaderboard table declared not reproducible") as c:
        readme = (ROOT / "README.md").read_text()
        assert "not reproducible" in readme.lower()
        # the harness still renders that table layout
        fake = {"summary": {k: {"dice_mean": d, "dice_std": s, "assd_mean": a, "assd_std": 0.0}
                            for k, (d, s, a) in PUBLISHED.items()}}
        table = render_table(fake)
        assert "0.8302 ± 0.0772" in table and "0.8220 ± 0.0310" in table
        c.detail = "declared in README; harness renders the table format"


# ---------------------------------------------------------------------------
# full pipeline runs


class _Runs:
    def __init__(self, base: Path):
        self.base = base
        self.done = {}

    def get(self, seed: int, tag: str = "a"):
        if (seed, tag) not in self.done:
            ws = self.base / f"seed{seed}{tag}"
            t0 = time.perf_counter()
            rc = cli.main(["run-all", "--workspace", str(ws), "--seed", str(seed), "--deterministic"])
            seconds = time.perf_counter() - t0
            assert rc == 0
            summary = json.loads((ws / "summary.json").read_text())
            self.done[seed, tag] = (ws, seconds, summary)
        return self.done[seed, tag]


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    return _Runs(tmp_path_factory.mktemp("acceptance"))


@pytest.mark.slow
def test_adaptation_gain(runs):
    cfg = PipelineConfig()
    assert cfg.data.n_cases == 20 and cfg.data.n_test == 5
    with criterion(f"adaptation gain >= +{GAIN_MARGIN} Dice(VS) for seeds {list(SEEDS)}, <= 30 min each") as c:
        parts, failures = [], []
        for seed in SEEDS:
            _, seconds, summary = runs.get(seed)
            gain = summary["gain_vs_dice"]
            parts.append(f"s{seed}: {summary['pipeline']['VS']['dice_mean']:.3f} vs "
                         f"{summary['baseline']['VS']['dice_mean']:.3f} ({gain:+.3f}, {seconds / 60:.1f} min)")
            if gain < GAIN_MARGIN or seconds > RUNTIME_LIMIT_S:
                failures.append(seed)
        c.detail = "; ".join(parts)
        assert not failures, c.detail


@pytest.mark.slow
def test_run_all_deterministic(runs):
    with criterion("run-all --deterministic --seed 0 twice is bitwise identical") as c:
        ws_a, _, _ = runs.get(0, "a")
        ws_b, _, _ = runs.get(0, "b")
        cfg = PipelineConfig(seed=0, deterministic=True)
        masks_a, masks_b = (stage_dir(w, "postprocess", cfg) / "masks" for w in (ws_a, ws_b))
        names = sorted(p.name for p in masks_a.iterdir())
        assert names == sorted(p.name for p in masks_b.iterdir()) and names
        assert tree_digest(masks_a) == tree_digest(masks_b)
        for stage, files in (("evaluate", ("report.json", "report.txt")), ("baseline", ("report.json", "report.txt"))):
            for f in files:
                a = (stage_dir(ws_a, stage, cfg) / f).read_bytes()
                assert a == (stage_dir(ws_b, stage, cfg) / f).read_bytes(), f"{stage}/{f}"
        assert (ws_a / "summary.json").read_bytes() == (ws_b / "summary.json").read_bytes()
        c.detail = f"{len(names)} final mask files and all reports identical"


# ---------------------------------------------------------------------------
# component oracles


def test_fusion_consensus():
    with criterion("fusion of three identical maps equals their argmax (10 trials)") as c:
        fus.test_consensus_three_identical()
        c.detail = "10/10"


def test_confident_joint_oracle():
    with criterion("confident joint matches brute force (100 x 500 voxels, K=3); worked example") as c:
        fus.test_confident_joint_matches_brute_force()
        fus.test_worked_example()
        c.detail = "100/100 exact; C=[[1,1],[0,1]], only v2 flagged"


def test_ema_algebra():
    with criterion("EMA algebra: fixpoint, copy, n-step closed form 1e-10, teacher never optimised") as c:
        mt.test_ema_fixpoint_and_copy()
        mt.test_ema_closed_form_recurrence()
        mt.test_ema_n_step_general_closed_form()
        mt.test_train_mean_teacher_log_and_no_teacher_optimizer_state()
        mt.test_alpha_one_teacher_frozen()


def test_loss_oracles():
    with criterion("five losses match brute force within 1e-6 (100 inputs each); dice_ce gradient vs FD") as c:
        losses.test_patchnce_matches_oracle()
        losses.test_dice_ce_matches_oracle()
        mt.test_consistency_loss_oracle_and_symmetry()
        losses.test_cycle_values_and_oracle()
        losses.test_adversarial_matches_oracle()
        losses.test_dice_ce_gradient_finite_differences()
        c.detail = "patchnce, dice_ce, consistency, cycle, adversarial; FD rel. err < 1e-3"


def test_metric_oracles():
    with criterion("Dice exact on set instances; ASSD vs exhaustive oracle 1e-9; parallel planes 3.0 mm") as c:
        mp.test_dice_matches_set_oracle()
        mp.test_assd_matches_exhaustive_oracle()
        mp.test_assd_parallel_planes()


def test_postprocess_rules():
    with criterion("distractor at dz=16 removed, dz=14 kept; chain idempotent and never adds") as c:
        mp.test_false_positive_rule_threshold_is_strict()
        mp.test_postprocess_idempotent_and_never_adds()


def test_registration_exactness():
    with criterion("registration recovers 100 integer shifts exactly; flip_lr involution") as c:
        reg.test_exact_recovery_random_shifts()
        rng = np.random.default_rng(0)
        for _ in range(20):
            v = Volume(rng.random(tuple(rng.integers(1, 9, 3))))
            assert np.array_equal(flip_lr(flip_lr(v)).voxels, v.voxels)
        c.detail = "100/100; flip_lr(flip_lr(v)) == v"
