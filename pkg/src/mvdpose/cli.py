"""Command-line interface: simulate, match, calibrate, triangulate, evaluate, pipeline, ablate.

Exit codes: 0 on success, 2 for unreadable input or bad parameters, 3
when a numerical stage fails. Log lines go to stderr as
``level=... stage=... frame=... msg="..."``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import IngestionError, MvdError, NumericalError, ParameterError
from .evaluation import VARIANTS, ablation_run, ablation_table, camera_error, pcp
from .io import (
    dataset_hash,
    dump_json,
    ingest_dataset,
    load_json,
    read_assignments,
    read_skeletons,
    write_assignments,
    write_dataset,
    write_skeletons,
)
from .pipeline import Calibration, PipelineConfig, calibrate, match_frames, run_pipeline, triangulate_frames
from .simulator import GroundTruth, SceneConfig, generate_sequence
from .triangulation import BonePrior, default_prior

log = logging.getLogger("mvdpose")

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3


class _ContextFilter(logging.Filter):
    def __init__(self, stage: str):
        super().__init__()
        self.stage = stage

    def filter(self, record):
        if not hasattr(record, "stage"):
            record.stage = self.stage
        if not hasattr(record, "frame"):
            record.frame = "-"
        return True


class _Formatter(logging.Formatter):
    def format(self, record):
        msg = record.getMessage().replace("\\", "\\\\").replace('"', '\\"')
        return f'level={record.levelname} stage={record.stage} frame={record.frame} msg="{msg}"'


def setup_logging(stage: str, verbosity: int = 0, stream=None) -> logging.Handler:
    handler = logging.StreamHandler(stream or sys.stderr)
    handler.setFormatter(_Formatter())
    handler.addFilter(_ContextFilter(stage))
    root = logging.getLogger("mvdpose")
    for h in list(root.handlers):
        root.removeHandler(h)
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbosity > 1 else logging.INFO if verbosity == 1 else logging.WARNING)
    root.propagate = False
    return handler


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

# flag dest -> PipelineConfig field
_PIPELINE_FLAGS = {
    "people": "num_people",
    "threshold": "pose_threshold",
    "depth_guide": "depth_guide",
    "depth_threshold": "depth_threshold",
    "lam": "regularization",
    "mode": "triangulation",
    "icp": "icp",
    "trim": "icp_trim",
    "anchor": "anchor",
    "window": "calibration_window",
    "seed": "seed",
    "bone_prior": "bone_prior",
}

_SCENE_FLAGS = {
    "views": "num_views",
    "people": "num_people",
    "seed": "seed",
    "px_noise": "px_noise",
    "depth_noise": "depth_noise",
    "dropout": "depth_dropout",
    "swaps": "identity_swaps",
}


def _read_config(args) -> dict:
    if getattr(args, "config", None) is None:
        return {}
    obj = load_json(args.config)
    if not isinstance(obj, dict):
        raise IngestionError(f"{args.config}: config must be a JSON object")
    return obj


def pipeline_config(args) -> PipelineConfig:
    """Defaults, then explicit flags, then the ``--config`` file (which wins)."""
    values = {}
    for flag, name in _PIPELINE_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[name] = v
    if getattr(args, "all_frames", False):
        values["calibration_window"] = None
    conf = _read_config(args)
    values.update(conf.get("pipeline", conf if "scene" not in conf else {}))
    return PipelineConfig.from_dict(values)


def scene_config(args) -> SceneConfig:
    values = {}
    for flag, name in _SCENE_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[name] = v
    conf = _read_config(args)
    scene = conf.get("scene", conf if "pipeline" not in conf else {})
    unknown = set(scene) - set(SceneConfig.__dataclass_fields__)
    if unknown:
        raise ParameterError(f"unknown scene config keys: {sorted(unknown)}")
    values.update(scene)
    return SceneConfig(**values)


def _load_prior(args) -> BonePrior | None:
    path = getattr(args, "bone_prior_file", None)
    if path is None:
        return None
    try:
        return BonePrior.from_dict(load_json(path))
    except (KeyError, TypeError, ValueError) as exc:
        raise IngestionError(f"{path}: bad bone prior ({exc})") from None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    scene = scene_config(args)
    bundles, gts = generate_sequence(scene, args.frames)
    write_dataset(args.out, bundles, {"scene": scene.to_dict(), "frames": [g.to_dict() for g in gts]})
    log.info("wrote %d frames x %d views to %s", len(bundles), scene.num_views, args.out)
    return EXIT_OK


def cmd_match(args) -> int:
    cfg = pipeline_config(args)
    bundles = ingest_dataset(args.data)
    assignments = match_frames(bundles, cfg)
    write_assignments(args.out, [b.timestamp for b in bundles], assignments)
    return EXIT_OK


def _assignments_for(args, bundles):
    src = args.assignments or args.out
    return read_assignments(src, [b.timestamp for b in bundles])


def cmd_calibrate(args) -> int:
    cfg = pipeline_config(args)
    bundles = ingest_dataset(args.data)
    calib = calibrate(bundles, _assignments_for(args, bundles), cfg)
    dump_json(Path(args.out) / "calibration.json", calib.to_dict())
    return EXIT_OK


def cmd_triangulate(args) -> int:
    cfg = pipeline_config(args)
    bundles = ingest_dataset(args.data)
    assignments = _assignments_for(args, bundles)
    calib_path = Path(args.calibration) if args.calibration else Path(args.out) / "calibration.json"
    try:
        calib = Calibration.from_dict(load_json(calib_path))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ParameterError):
            raise IngestionError(f"{calib_path}: {exc}") from None
        raise IngestionError(f"{calib_path}: bad calibration entry ({exc})") from None
    skeletons = triangulate_frames(bundles, assignments, calib, cfg, _load_prior(args))
    write_skeletons(args.out, [b.timestamp for b in bundles], skeletons)
    return EXIT_OK


def write_run(out: Path | str, data: Path | str | None, bundles, result, cfg: PipelineConfig) -> None:
    """Every stage output of a pipeline run plus its manifest."""
    out = Path(out)
    stamps = [b.timestamp for b in bundles]
    write_assignments(out, stamps, result.assignments)
    dump_json(out / "calibration.json", result.calibration.to_dict())
    write_skeletons(out, stamps, result.skeletons)
    dump_json(out / "report.json", result.report)
    dump_json(out / "manifest.json", {
        "package_version": __version__,
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "dataset_hash": dataset_hash(data) if data is not None else None,
        "frames": stamps,
    })


def cmd_pipeline(args) -> int:
    cfg = pipeline_config(args)
    bundles = ingest_dataset(args.data)
    result = run_pipeline(bundles, cfg, _load_prior(args))
    write_run(args.out, args.data, bundles, result, cfg)
    return EXIT_OK


def _ground_truth(gt_dir) -> list[GroundTruth]:
    path = Path(gt_dir) / "ground_truth.json"
    obj = load_json(path)
    try:
        return [GroundTruth.from_dict(f) for f in obj["frames"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise IngestionError(f"{path}: bad ground truth ({exc})") from None


def evaluate_dirs(pred_dir, gt_dir, alpha: float = 0.5, align: bool = True, anchor: int = 0) -> dict:
    """Camera errors (per view and mean) and PCP (per actor, per part, average) of a run."""
    gts = _ground_truth(gt_dir)
    calib_path = Path(pred_dir) / "calibration.json"
    try:
        calib = Calibration.from_dict(load_json(calib_path))
    except (KeyError, TypeError, ValueError) as exc:
        raise IngestionError(f"{calib_path}: bad calibration entry ({exc})") from None
    g0 = gts[0]
    if anchor not in g0.poses:
        raise ParameterError(f"anchor view {anchor} not in ground truth")
    to_anchor = g0.poses[anchor].inverse()
    gt_poses = {v: T.compose(to_anchor) for v, T in g0.poses.items()}
    missing = set(gt_poses) - set(calib.poses)
    if missing:
        raise IngestionError(f"{calib_path}: no pose for views {sorted(missing)}")
    cam = camera_error({v: calib.poses[v] for v in gt_poses}, gt_poses, align=align)
    preds = read_skeletons(pred_dir)
    prior = default_prior()
    frames = {}
    for gt in gts:
        truth = [s.transformed(gt.poses[anchor], "world") for s in gt.skeletons]
        rep = pcp(preds.get(gt.timestamp, []), truth, prior, alpha)
        frames[str(gt.timestamp)] = rep.to_dict()
    per_actor = np.mean([f["per_actor"] for f in frames.values()], axis=0) if frames else np.zeros(0)
    per_part = np.mean([f["per_part"] for f in frames.values()], axis=0) if frames else np.zeros(0)
    return {
        "camera_pose": {**cam.to_dict(), "gauge_aligned": align},
        "pcp": {
            "alpha": alpha,
            "per_actor": {f"actor_{a + 1}": float(x) for a, x in enumerate(per_actor)},
            "per_part": [float(x) for x in per_part],
            "average": float(np.mean(per_actor)) if len(per_actor) else 0.0,
            "frames": frames,
        },
    }


def cmd_evaluate(args) -> int:
    report = evaluate_dirs(args.pred, args.gt, args.alpha, args.gauge_align, args.anchor)
    if args.report:
        dump_json(args.report, report)
    else:
        print(json.dumps(report, sort_keys=True, indent=1))
    return EXIT_OK


def cmd_ablate(args) -> int:
    scene = scene_config(args)
    base = pipeline_config(args)
    if getattr(args, "people", None) is None:
        base = replace(base, num_people=scene.num_people)
    run = ablation_run(range(args.seeds), args.variants, scene, base, args.frames, args.alpha)
    table = ablation_table(run)
    table["per_seed"] = {
        name: {"rotation_deg": r.rotation, "translation_mm": r.translation, "pcp": r.pcp}
        for name, r in run["variants"].items()
    }
    if args.report:
        dump_json(args.report, table)
    else:
        print(json.dumps(table, sort_keys=True, indent=1))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", help="JSON file; its values override the flags")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")


def _add_pipeline_flags(p, calib=True, tri=True):
    p.add_argument("--people", type=int, help="number of people K")
    p.add_argument("--seed", type=int)
    if calib:
        p.add_argument("--threshold", type=float, help="pose residual threshold (default 0.01)")
        p.add_argument("--anchor", type=int, help="view defining the world frame (default 0)")
        p.add_argument("--icp", action=argparse.BooleanOptionalAction, default=None, help="trimmed ICP refinement")
        p.add_argument("--trim", type=float, help="ICP trim fraction (default 0.2)")
        p.add_argument("--depth-guide", dest="depth_guide", action=argparse.BooleanOptionalAction, default=None)
        p.add_argument("--window", type=int, help="calibration window in frames (default 50)")
        p.add_argument("--all-frames", action="store_true", help="calibrate over every frame")
    if tri:
        p.add_argument("--depth-threshold", type=float, help="anchor gate in mm (default 100)")
        p.add_argument("--lam", type=float, help="anchor regularization weight (default 1)")
        p.add_argument("--mode", choices=["gated", "naive", "forced"])
        p.add_argument("--bone-prior", dest="bone_prior", action=argparse.BooleanOptionalAction, default=None)
        p.add_argument("--bone-prior-file", help="bone prior JSON {edges, symmetric, tolerance}")


def _add_scene_flags(p):
    p.add_argument("--views", type=int)
    p.add_argument("--people", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--px-noise", type=float)
    p.add_argument("--depth-noise", type=float)
    p.add_argument("--dropout", type=float, help="depth dropout probability")
    p.add_argument("--swaps", type=int, help="identity-swap corruptions per frame")
    p.add_argument("--frames", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvdpose", description="Multi-view depth camera calibration and 3D pose.")
    parser.add_argument("--version", action="version", version=f"mvdpose {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic dataset")
    _add_scene_flags(p)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("match", help="cluster detections across views")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_pipeline_flags(p, calib=False, tri=False)
    _add_common(p)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("calibrate", help="estimate camera poses")
    p.add_argument("--data", required=True)
    p.add_argument("--assignments", help="directory with frame_<t>/assignment.json (default --out)")
    p.add_argument("--out", required=True)
    _add_pipeline_flags(p, calib=True, tri=False)
    _add_common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("triangulate", help="reconstruct 3D skeletons")
    p.add_argument("--data", required=True)
    p.add_argument("--assignments", help="directory with frame_<t>/assignment.json (default --out)")
    p.add_argument("--calibration", help="calibration.json (default <out>/calibration.json)")
    p.add_argument("--out", required=True)
    _add_pipeline_flags(p, calib=False, tri=True)
    _add_common(p)
    p.set_defaults(func=cmd_triangulate)

    p = sub.add_parser("pipeline", help="match, calibrate and triangulate in one run")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_pipeline_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("evaluate", help="score a run against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--anchor", type=int, default=0)
    p.add_argument("--gauge-align", dest="gauge_align", action=argparse.BooleanOptionalAction, default=True,
                   help="similarity-align cameras before scoring (--no-gauge-align compares raw)")
    p.add_argument("--raw", dest="gauge_align", action="store_false", help="same as --no-gauge-align")
    p.add_argument("--report")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="compare pipeline variants on seeded synthetic scenes")
    _add_scene_flags(p)
    p.add_argument("--seeds", type=int, default=20, help="number of seeds, 0..N-1")
    p.add_argument("--variants", nargs="+", default=list(VARIANTS), help=f"{sorted(VARIANTS)} or views=N")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--report")
    _add_common(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = setup_logging(args.command, args.verbose)
    try:
        return args.func(args)
    except (IngestionError, ParameterError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except NumericalError as exc:
        log.error("%s", exc)
        return EXIT_NUMERICAL
    except MvdError as exc:
        log.error("%s", exc)
        return EXIT_NUMERICAL
    finally:
        logging.getLogger("mvdpose").removeHandler(handler)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
