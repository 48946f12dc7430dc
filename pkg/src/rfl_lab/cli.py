"""Command-line front-end: loss-table, gradcheck, experiment, tile, fuse, eval.

Exit codes: 0 success, 1 check or experiment failure, 2 usage or config
errors (including missing or unparsable input files).  All primary
outputs (CSV, JSON, JSONL) are byte-identical across reruns with the
same inputs; the environment variable ``RFL_LAB_SEED`` supplies the
seed list when neither the config nor ``--seeds`` provides one.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .ensemble import FusionConfig, ScoreMode, TtaPass, ensemble_pipeline
from .experiment import ConfigError, round_floats, run_experiment
from .geometry import (
    SceneDims,
    TtaTransform,
    clip_boxes_to_tile,
    tile_axis_counts,
    tile_grid,
)
from .losses import (
    LossKind,
    LossParams,
    binary_loss_and_grad,
    ce_loss,
    cutoff_factor,
    focal_loss,
    loss_grad_pt,
    loss_value,
    reduced_focal_loss,
    softmax_loss_and_grad,
)
from .metrics import (
    map_and_mrecall,
    read_detections_jsonl,
    read_groundtruths_jsonl,
    write_detections_jsonl,
)
from . import svg

# Gradient-check grid shared with the test suite.
PT_GRID = [0.01] + [k * 0.05 for k in range(1, 20)] + [0.99]
GAMMA_GRID = [0.0, 0.5, 1.0, 2.0, 5.0]
TH_GRID = [0.25, 0.5, 0.9]


def _fmt(value: float) -> str:
    return f"{value:.9g}"


def _json_dump(obj, fh) -> None:
    json.dump(round_floats(obj), fh, sort_keys=True, indent=2)
    fh.write("\n")


def _parse_scene(text: str) -> SceneDims:
    try:
        w, h = text.lower().split("x")
        return SceneDims(float(w), float(h))
    except (ValueError, TypeError) as exc:
        raise argparse.ArgumentTypeError(
            f"scene must look like 1000x1000, got {text!r}"
        ) from exc


# ---------------------------------------------------------------------------
# loss-table
# ---------------------------------------------------------------------------


def cmd_loss_table(args) -> int:
    params_fl = LossParams(kind=LossKind.FL, gamma=args.gamma)
    params_rfl = LossParams(kind=LossKind.RFL, gamma=args.gamma, threshold=args.th)
    if args.steps == 1:
        grid = [args.pt_min]
    else:
        grid = np.linspace(args.pt_min, args.pt_max, args.steps)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["pt", "ce", "fl", "rfl", "cutoff_factor"])
    for pt in grid:
        pt = float(pt)
        writer.writerow([
            _fmt(pt),
            _fmt(ce_loss(pt)),
            _fmt(focal_loss(pt, params_fl)),
            _fmt(reduced_focal_loss(pt, params_rfl)),
            _fmt(cutoff_factor(pt, params_rfl)),
        ])
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def _rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(numeric), 1e-12)


def _central(f, x: float, h: float = 1e-6) -> float:
    return (f(x + h) - f(x - h)) / (2.0 * h)


def run_gradcheck(kink_band: float, negate: bool = False):
    """Full finite-difference grid; returns (worst, sections).

    ``worst`` is a dict describing the largest relative error seen;
    ``sections`` maps check names to their maximum relative error.
    """
    flip = -1.0 if negate else 1.0
    worst = {"rel_err": 0.0, "where": "", "at_kink": False}
    sections: dict[str, float] = {}

    def record(section: str, err: float, where: str, at_kink: bool) -> None:
        sections[section] = max(sections.get(section, 0.0), err)
        if err > worst["rel_err"]:
            worst.update(rel_err=err, where=where, at_kink=at_kink)

    rng = np.random.default_rng(12345)
    logit_vectors = [rng.normal(size=k) for k in (2, 5, 5, 8) for _ in range(4)]

    for kind in LossKind:
        for gamma in GAMMA_GRID:
            for th in TH_GRID:
                params = LossParams(kind=kind, gamma=gamma, threshold=th)
                label = f"{kind.value} gamma={gamma} th={th}"
                for pt in PT_GRID:
                    at_kink = abs(pt - th) < 1e-12
                    if kink_band > 0 and abs(pt - th) < kink_band:
                        continue
                    ana = flip * loss_grad_pt(pt, params)
                    num = _central(lambda p: loss_value(p, params), pt)
                    record("scalar", _rel_err(ana, num),
                           f"scalar {label} pt={pt:g}", at_kink)

                    for y in (0, 1):
                        target = pt if y == 1 else 1.0 - pt
                        z = math.log(target / (1.0 - target))
                        _, g = binary_loss_and_grad(z, y, params)
                        num = _central(
                            lambda v: binary_loss_and_grad(v, y, params)[0], z
                        )
                        record("binary", _rel_err(flip * g, num),
                               f"binary {label} pt={pt:g} label={y}", at_kink)

    # Logit vectors realizing each grid pt exactly (softmax[0] = pt), plus
    # a few random ones for off-grid coverage.
    grid_vectors = []
    for pt in PT_GRID:
        for k in (2, 5):
            z = np.zeros(k)
            z[0] = math.log(pt * (k - 1) / (1.0 - pt))
            grid_vectors.append((pt, z))
    for z in logit_vectors:
        zmax = z - z.max()
        p = np.exp(zmax) / np.exp(zmax).sum()
        grid_vectors.append((float(p[0]), z))

    for kind in LossKind:
        for gamma in GAMMA_GRID:
            for th in TH_GRID:
                params = LossParams(kind=kind, gamma=gamma, threshold=th)
                label = f"{kind.value} gamma={gamma} th={th}"
                for pt, z in grid_vectors:
                    at_kink = abs(pt - th) < 1e-12
                    if kink_band > 0 and abs(pt - th) < kink_band:
                        continue
                    _, grad = softmax_loss_and_grad(z, 0, params)
                    for j in range(len(z)):
                        def f(v, j=j):
                            zz = z.copy()
                            zz[j] = v
                            return softmax_loss_and_grad(zz, 0, params)[0]
                        num = _central(f, float(z[j]))
                        record("softmax", _rel_err(flip * grad[j], num),
                               f"softmax {label} pt={pt:g} component {j}", at_kink)
    return worst, sections


def cmd_gradcheck(args) -> int:
    tolerances = {"scalar": 1e-6, "binary": 1e-5, "softmax": 1e-5}
    worst, sections = run_gradcheck(args.skip_kink_band, negate=args.negate_grad)
    failed = False
    for section in ("scalar", "binary", "softmax"):
        err = sections.get(section, 0.0)
        ok = err < tolerances[section]
        failed |= not ok
        print(f"{section:8s} max rel err {err:.3e}  "
              f"(tolerance {tolerances[section]:.0e})  "
              f"{'ok' if ok else 'FAIL'}")
    if failed:
        note = ""
        if worst["at_kink"]:
            note = " (at the pt = th kink; the loss is not differentiable there)"
        print(f"worst offender: {worst['where']} "
              f"rel_err={worst['rel_err']:.3e}{note}", file=sys.stderr)
        print("gradcheck: FAIL", file=sys.stderr)
        return 1
    print("gradcheck: PASS")
    return 0


# ---------------------------------------------------------------------------
# experiment
# ---------------------------------------------------------------------------


def _write_plots(report: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    arms = report["arms"]
    kind = report["kind"]
    recall_key = (
        "per_class_recall" if kind == "classifier" else "per_class_proposal_recall"
    )
    classes = sorted(
        {c for arm in arms.values() for c in arm["mean"][recall_key]},
        key=int,
    )
    series = {
        name: [arm["mean"][recall_key].get(c, 0.0) for c in classes]
        for name, arm in arms.items()
    }
    bars = svg.grouped_bar_chart(
        "Per-class recall by arm", [str(c) for c in classes], series
    )
    (out_dir / "recall_bars.svg").write_text(bars)

    curves = {
        name: arm["per_seed"][0]["loss_curve"]
        for name, arm in arms.items()
        if arm["per_seed"][0].get("loss_curve")
    }
    if curves:
        (out_dir / "loss_curves.svg").write_text(
            svg.line_chart("Training loss (first seed)", curves)
        )


def cmd_experiment(args) -> int:
    try:
        with open(args.config) as fh:
            config = json.load(fh)
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as exc:
        print(f"config is not valid JSON: {exc}", file=sys.stderr)
        return 2

    if args.seeds:
        try:
            seeds = [int(s) for s in args.seeds.split(",")]
        except ValueError:
            print(f"--seeds must be comma-separated integers, got {args.seeds!r}",
                  file=sys.stderr)
            return 2
        config["seeds"] = seeds
    if "seeds" not in config and os.environ.get("RFL_LAB_SEED"):
        config["seeds"] = [int(os.environ["RFL_LAB_SEED"])]

    try:
        report = run_experiment(config, include_timing=args.timing)
    except (ConfigError, ValueError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"cannot read dataset: {exc}", file=sys.stderr)
        return 2

    out = Path(args.out)
    with open(out, "w") as fh:
        _json_dump(report, fh)
    print(f"report written to {out}")
    if args.plots:
        _write_plots(round_floats(report), Path(args.plots))
        print(f"plots written to {args.plots}")
    if args.dump_data:
        if config["kind"] != "classifier":
            print("--dump-data only applies to classifier experiments",
                  file=sys.stderr)
            return 2
        from .experiment import _classifier_data
        from .sampling import write_dataset_csv

        dump_dir = Path(args.dump_data)
        dump_dir.mkdir(parents=True, exist_ok=True)
        for seed in report["seeds"]:
            train_data, _, _ = _classifier_data(config, seed)
            write_dataset_csv(train_data, dump_dir / f"dataset_seed{seed}.csv")
        print(f"datasets written to {dump_dir}")
    return 0


# ---------------------------------------------------------------------------
# tile
# ---------------------------------------------------------------------------


def cmd_tile(args) -> int:
    tiles = tile_grid(args.scene, args.tile, args.overlap)
    nx, _ = tile_axis_counts(args.scene, args.tile, args.overlap)

    boxes = None
    if args.boxes:
        try:
            boxes = read_detections_jsonl(args.boxes)
        except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
            print(f"cannot read boxes: {exc}", file=sys.stderr)
            return 2

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "scene": {"width": args.scene.width, "height": args.scene.height},
        "tile": args.tile,
        "overlap": args.overlap,
        "tiles": [],
    }
    for i, t in enumerate(tiles):
        ix, iy = i % nx, i // nx
        entry = {
            "ix": ix, "iy": iy,
            "origin_x": t.origin_x, "origin_y": t.origin_y,
            "tile_w": t.tile_w, "tile_h": t.tile_h,
        }
        manifest["tiles"].append(entry)
        if boxes is not None:
            local = clip_boxes_to_tile(boxes, t, args.min_visibility)
            write_detections_jsonl(local, out_dir / f"tile_{ix}_{iy}.jsonl")
    with open(out_dir / "manifest.json", "w") as fh:
        _json_dump(manifest, fh)
    print(f"{len(tiles)} tiles -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# fuse
# ---------------------------------------------------------------------------


def cmd_fuse(args) -> int:
    n = len(args.inputs)
    sources = args.source or []
    transforms = args.transform or []
    if sources and len(sources) != n:
        print(f"got {len(sources)} --source flags for {n} inputs", file=sys.stderr)
        return 2
    if transforms and len(transforms) != n:
        print(f"got {len(transforms)} --transform flags for {n} inputs",
              file=sys.stderr)
        return 2

    weights = {}
    for item in args.weight or []:
        try:
            tag, value = item.rsplit("=", 1)
            weights[tag] = float(value)
        except ValueError:
            print(f"--weight must look like source=1.5, got {item!r}",
                  file=sys.stderr)
            return 2

    passes = []
    needs_scene = False
    for i, path in enumerate(args.inputs):
        try:
            dets = read_detections_jsonl(path)
        except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
            print(f"cannot read {path}: {exc}", file=sys.stderr)
            return 2
        try:
            transform = TtaTransform.parse(transforms[i]) if transforms else (
                TtaTransform.identity())
        except ValueError as exc:
            print(f"bad transform for {path}: {exc}", file=sys.stderr)
            return 2
        if transform.ops:
            needs_scene = True
        # An explicit --source overrides the file's own tags; otherwise the
        # tags pass through untouched (single-file fusion stays a fixpoint).
        source = sources[i] if sources else ""
        passes.append(TtaPass(dets, transform, source))

    if needs_scene and args.scene is None:
        print("--scene is required when any --transform is not identity",
              file=sys.stderr)
        return 2
    scene = args.scene or SceneDims(1.0, 1.0)

    try:
        cfg = FusionConfig(
            iou_thresh=args.iou_thresh,
            min_votes=args.min_votes,
            score_mode=ScoreMode(args.score_mode),
            source_weights=weights,
        )
    except ValueError as exc:
        print(f"invalid fusion config: {exc}", file=sys.stderr)
        return 2

    fused = ensemble_pipeline(passes, scene, cfg)
    if args.out:
        write_detections_jsonl(fused, args.out)
        print(f"{len(fused)} fused detections -> {args.out}")
    else:
        from .metrics import detection_to_json

        for det in fused:
            sys.stdout.write(json.dumps(detection_to_json(det), sort_keys=True) + "\n")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    try:
        dets = read_detections_jsonl(args.dets)
        gts = read_groundtruths_jsonl(args.gts)
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"cannot read inputs: {exc}", file=sys.stderr)
        return 2
    try:
        summary = map_and_mrecall(dets, gts, args.iou_thresh)
    except ValueError as exc:
        print(f"evaluation failed: {exc}", file=sys.stderr)
        return 2
    payload = {
        "map": summary.map,
        "recall": summary.recall,
        "m_recall": summary.m_recall,
        "iou_thresh": args.iou_thresh,
        "per_class": {
            str(cls): {
                "ap": m.ap,
                "recall": m.recall,
                "gt_count": m.gt_count,
                "det_count": m.det_count,
            }
            for cls, m in summary.per_class.items()
        },
    }
    if args.out:
        with open(args.out, "w") as fh:
            _json_dump(payload, fh)
        print(f"evaluation written to {args.out}")
    else:
        _json_dump(payload, sys.stdout)
    return 0


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rfl-lab",
        description="Reduced-focal-loss laboratory: losses, training, "
                    "tiling, fusion, and detection metrics.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("loss-table", help="CSV of CE/FL/RFL over a pt grid")
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--th", type=float, default=0.5)
    p.add_argument("--steps", type=int, default=99)
    p.add_argument("--pt-min", type=float, default=0.01)
    p.add_argument("--pt-max", type=float, default=0.99)
    p.set_defaults(func=cmd_loss_table)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--skip-kink-band", type=float, default=1e-4,
                   help="half-width of the pt band excluded around pt = th")
    p.add_argument("--negate-grad", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("experiment", help="run a config-driven experiment")
    p.add_argument("config", help="JSON config path")
    p.add_argument("--out", default="experiment_report.json")
    p.add_argument("--plots", metavar="DIR", help="also emit SVG charts")
    p.add_argument("--seeds", help="comma-separated seed override")
    p.add_argument("--timing", action="store_true",
                   help="include wall-clock seconds (breaks byte determinism)")
    p.add_argument("--dump-data", metavar="DIR",
                   help="also write each seed's training dataset as CSV")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("tile", help="tile a scene and optionally clip boxes")
    p.add_argument("--scene", type=_parse_scene, required=True, metavar="WxH")
    p.add_argument("--tile", type=float, required=True)
    p.add_argument("--overlap", type=float, default=0.0)
    p.add_argument("--boxes", help="JSONL boxes to clip per tile")
    p.add_argument("--min-visibility", type=float, default=1e-9)
    p.add_argument("--out-dir", default="tiles")
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("fuse", help="fuse detections from multiple passes")
    p.add_argument("inputs", nargs="+", help="JSONL detection files")
    p.add_argument("--source", action="append",
                   help="source tag per input (default: file stem)")
    p.add_argument("--transform", action="append",
                   help="TTA transform per input, e.g. rot90+scale:1.2")
    p.add_argument("--scene", type=_parse_scene, metavar="WxH")
    p.add_argument("--iou-thresh", type=float, default=0.5)
    p.add_argument("--min-votes", type=int, default=1)
    p.add_argument("--score-mode", default="mean",
                   choices=[m.value for m in ScoreMode])
    p.add_argument("--weight", action="append", metavar="SOURCE=W")
    p.add_argument("--out", help="output JSONL (default: stdout)")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="mAP / recall / mRecall of detections")
    p.add_argument("--dets", required=True)
    p.add_argument("--gts", required=True)
    p.add_argument("--iou-thresh", type=float, default=0.5)
    p.add_argument("--out", help="output JSON (default: stdout)")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "loss-table":
        if args.gamma < 0 or not (0.0 < args.th <= 1.0) or args.steps < 1:
            parser.error("require gamma >= 0, 0 < th <= 1, steps >= 1")
        if not (0.0 < args.pt_min <= args.pt_max < 1.0):
            parser.error("require 0 < pt-min <= pt-max < 1")
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
