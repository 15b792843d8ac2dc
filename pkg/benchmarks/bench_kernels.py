"""Compare the numba and numpy paths of the raster kernels.

Inputs come from a simulated frame, so sizes match what the pipeline
sees. JIT compilation is triggered before timing.

    python3 benchmarks/bench_kernels.py --repeat 20
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from mvdpose import _kernels
from mvdpose.geometry import backproject_depth
from mvdpose.simulator import DEPTH_INTRINSICS, RGB_INTRINSICS, SceneConfig, camera_rig, generate_frame, place_people, _rng


def _inputs(seed: int) -> dict[str, tuple]:
    cfg = SceneConfig(seed=seed)
    bundle, _ = generate_frame(cfg)
    view = bundle.views[0]

    # registration splat: the depth cloud projected into the RGB raster
    pts = view.depth_to_rgb.apply(backproject_depth(view.depth))
    pts = pts[pts[:, 2] > 0]
    intr = RGB_INTRINSICS
    u = np.floor(intr.fx * pts[:, 0] / pts[:, 2] + intr.cx + 0.5).astype(np.int64)
    v = np.floor(intr.fy * pts[:, 1] / pts[:, 2] + intr.cy + 0.5).astype(np.int64)
    splat = (u, v, np.ascontiguousarray(pts[:, 2]), intr.height, intr.width)

    # marker discs of every joint, seen by the first depth camera
    poses, offsets = camera_rig(cfg)
    world_to_depth = offsets[0].inverse().compose(poses[0])
    people = place_people(cfg, _rng(cfg, 2, 0))
    centres = np.concatenate([world_to_depth.apply(p.joints) for p in people])
    d = DEPTH_INTRINSICS
    markers = (np.zeros((d.height, d.width)), d.fx, d.fy, d.cx, d.cy, np.ascontiguousarray(centres),
               np.array([0.0, 0.0, 1.0]), cfg.marker_radius)

    inv = world_to_depth.inverse()
    room = (np.ascontiguousarray(inv.rotation), np.ascontiguousarray(inv.translation), d.fx, d.fy, d.cx, d.cy,
            d.height, d.width, cfg.room_extent, cfg.wall_height)
    return {"splat_min_depth": splat, "render_markers": markers, "raycast_room": room}


def _best_of(fn, args, repeat: int) -> float:
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return best


def run(repeat: int = 10, seed: int = 0) -> list[dict]:
    if _kernels.numba is None:
        raise SystemExit("numba is not installed; nothing to compare")
    inputs = _inputs(seed)
    rows = []
    for name, args in inputs.items():
        fast = getattr(_kernels, f"{name}_numba")
        slow = getattr(_kernels, f"{name}_numpy")
        fast(*args)  # compile
        a, b = fast(*args), slow(*args)
        both = np.isfinite(a) & np.isfinite(b)
        same_mask = bool(np.array_equal(np.isfinite(a), np.isfinite(b)))
        max_diff = float(np.abs(a[both] - b[both]).max(initial=0.0))
        t_fast, t_slow = _best_of(fast, args, repeat), _best_of(slow, args, repeat)
        rows.append({
            "kernel": name,
            "numba_ms": 1e3 * t_fast,
            "numpy_ms": 1e3 * t_slow,
            "speedup": t_slow / t_fast if t_fast > 0 else float("inf"),
            "same_support": same_mask,
            "max_abs_diff": max_diff,
        })
    return rows


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true", help="print JSON instead of a table")
    args = p.parse_args(argv)
    rows = run(args.repeat, args.seed)
    if args.json:
        print(json.dumps(rows, indent=1))
        return
    print(f"{'kernel':<18}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}  {'max |diff|':>10}")
    for r in rows:
        print(f"{r['kernel']:<18}{r['numba_ms']:>10.3f}{r['numpy_ms']:>10.3f}{r['speedup']:>8.1f}x  {r['max_abs_diff']:>10.3g}")


if __name__ == "__main__":
    main()
