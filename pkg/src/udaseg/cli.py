"""Command-line entry point: one subcommand per pipeline stage plus ``run-all``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import PipelineConfig, load_config, save_config
from .core_data import read_labels, read_probs, write_labels
from .errors import ConfigurationError, DependencyError, UdaSegError
from .label_fusion import fuse_three
from .pipeline import PIPELINE_ORDER, evaluate_report, render_table, run_all, run_stage, summarize
from .postprocess import postprocess_mask

log = logging.getLogger("udaseg")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="JSON pipeline config (defaults are used when omitted)")
    p.add_argument("--workspace", type=Path, help="workspace directory (or $UDASEG_WORKSPACE)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--deterministic", action="store_true", help="force deterministic kernels")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="udaseg", description="Cross-modality VS/cochlea segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()
    for name in PIPELINE_ORDER:
        if name in ("fuse", "postprocess", "evaluate"):
            continue
        sp = sub.add_parser(name, parents=[common], help=f"run the {name} stage")
        sp.add_argument("--force", action="store_true", help="rerun even if outputs exist")

    sp = sub.add_parser("fuse", parents=[common], help="fuse three probability maps (stage or file mode)")
    sp.add_argument("--probs", nargs=3, type=Path, metavar=("P1", "P2", "P3"))
    sp.add_argument("--order", nargs=3, type=int, metavar="I")
    sp.add_argument("--out", type=Path, help="output mask path (file mode)")
    sp.add_argument("--force", action="store_true")

    sp = sub.add_parser("postprocess", parents=[common], help="clean a mask (stage or file mode)")
    sp.add_argument("--mask", type=Path)
    sp.add_argument("--out", type=Path)
    sp.add_argument("--force", action="store_true")

    sp = sub.add_parser("evaluate", parents=[common], help="Dice/ASSD report (stage or directory mode)")
    sp.add_argument("--pred-dir", type=Path)
    sp.add_argument("--gt-dir", type=Path)
    sp.add_argument("--out", type=Path, help="write the JSON report here (directory mode)")
    sp.add_argument("--force", action="store_true")

    sp = sub.add_parser("run-all", parents=[common], help="run every stage, then print the summary")
    sp = sub.add_parser("dump-config", parents=[common], help="write the effective config as JSON")
    sp.add_argument("path", type=Path)
    return parser


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.deterministic:
        cfg.deterministic = True
    return cfg.validate()


def _workspace(args) -> Path:
    ws = args.workspace or os.environ.get("UDASEG_WORKSPACE")
    if not ws:
        raise ConfigurationError("no workspace: pass --workspace or set UDASEG_WORKSPACE")
    return Path(ws)


def _fmt_summary(summary: dict) -> str:
    lines = []
    for key in ("pipeline", "baseline"):
        if key in summary:
            vs = summary[key]["VS"]
            lines.append(f"{key:<10} Dice(VS) {vs['dice_mean']:.4f} ± {vs['dice_std']:.4f}")
    for name, s in summary.get("models", {}).items():
        lines.append(f"  {name:<12} Dice(VS) {s['VS']['dice_mean']:.4f}")
    if "gain_vs_dice" in summary:
        lines.append(f"gain       {summary['gain_vs_dice']:+.4f}")
    return "\n".join(lines)


def _dispatch(args) -> int:
    cmd = args.command
    if cmd == "fuse" and args.probs:
        if not args.out:
            raise ConfigurationError("--out is required with --probs")
        order = tuple(args.order) if args.order else _config(args).fusion.order
        mask, reports = fuse_three(*(read_probs(p) for p in args.probs), order=order)
        write_labels(mask, args.out)
        print(json.dumps([r.to_dict() for r in reports], indent=1))
        return 0
    if cmd == "postprocess" and args.mask:
        if not args.out:
            raise ConfigurationError("--out is required with --mask")
        pp = _config(args).postprocess
        write_labels(postprocess_mask(read_labels(args.mask), pp.z_threshold, pp.connectivity, pp.z_sign), args.out)
        return 0
    if cmd == "evaluate" and (args.pred_dir or args.gt_dir):
        if not (args.pred_dir and args.gt_dir):
            raise ConfigurationError("--pred-dir and --gt-dir go together")
        report = evaluate_report(args.pred_dir, args.gt_dir, _config(args))
        if args.out:
            args.out.write_text(json.dumps(report, indent=1, sort_keys=True))
        print(render_table(report), end="")
        return 0

    cfg = _config(args)
    if cmd == "dump-config":
        save_config(cfg, args.path)
        return 0
    ws = _workspace(args)
    if cmd == "run-all":
        summary = run_all(cfg, ws)
        print(_fmt_summary(summary))
        return 0
    entry = run_stage(cmd, cfg, ws, force=args.force)
    print(f"{cmd}: {entry['status']} -> {ws / entry['dir']}")
    if cmd in ("evaluate", "baseline"):
        print((ws / entry["dir"] / "report.txt").read_text(), end="")
        print(_fmt_summary(summarize(cfg, ws)))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except DependencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigurationError, UdaSegError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
