"""Dataset layout, depth raster format and JSON writers for every stage.

Layout of a dataset directory::

    view_<v>/intrinsics.json       {rgb, depth, depth_to_rgb}
    view_<v>/frame_<t>.depth       MVDD raster
    frame_<t>/detections.json      [{view, index, bbox, joints, valid, feature, score}]
    ground_truth.json              optional, written by the simulator

Stage outputs go to a separate directory: ``frame_<t>/assignment.json``,
``calibration.json``, ``frame_<t>/skeletons.json`` and ``manifest.json``.
All JSON is written with sorted keys so reruns are byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import re
import struct
from pathlib import Path

import numpy as np

from .bundle import FrameBundle, ViewData
from .errors import IngestionError, MvdError
from .geometry import CameraIntrinsics, DepthImage, RigidTransform, Skeleton2D, Skeleton3D
from .matching import Assignment, Detection

MAGIC = b"MVDD"
HEADER = struct.Struct("<4sIII")

_FRAME_DIR = re.compile(r"^frame_(\d+)$")
_VIEW_DIR = re.compile(r"^view_(\d+)$")


# ---------------------------------------------------------------------------
# low-level helpers
# ---------------------------------------------------------------------------


def dump_json(path: Path | str, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n")


def load_json(path: Path | str):
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise IngestionError(f"{path}: file not found") from None
    except json.JSONDecodeError as exc:
        raise IngestionError(f"{path}: malformed JSON ({exc.msg} at line {exc.lineno})") from None


def _field(obj: dict, key: str, path: Path, where: str = ""):
    if not isinstance(obj, dict) or key not in obj:
        raise IngestionError(f"{path}: missing field '{key}'{where}")
    return obj[key]


# ---------------------------------------------------------------------------
# depth rasters
# ---------------------------------------------------------------------------


def write_depth(path: Path | str, depth: DepthImage) -> None:
    """Store a raster as MVDD: 16-byte header, then uint16 little-endian millimetres."""
    r = depth.raster
    if r.max(initial=0.0) > 65535:
        raise ValueError(f"{path}: depth above 65535 mm cannot be stored")
    h, w = r.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(HEADER.pack(MAGIC, w, h, 0) + np.rint(r).astype("<u2").tobytes())


def read_depth(path: Path | str, intrinsics: CameraIntrinsics) -> DepthImage:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise IngestionError(f"{path}: depth file not found") from None
    if len(data) < HEADER.size:
        raise IngestionError(f"{path}: truncated header ({len(data)} bytes)")
    magic, w, h, _ = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise IngestionError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if (w, h) != (intrinsics.width, intrinsics.height):
        raise IngestionError(f"{path}: raster is {w}x{h} but depth intrinsics say {intrinsics.width}x{intrinsics.height}")
    expected = HEADER.size + 2 * w * h
    if len(data) != expected:
        raise IngestionError(f"{path}: {len(data)} bytes, expected {expected} for a {w}x{h} raster")
    raster = np.frombuffer(data, dtype="<u2", offset=HEADER.size).reshape(h, w).astype(np.float64)
    return DepthImage(raster, intrinsics)


# ---------------------------------------------------------------------------
# detections
# ---------------------------------------------------------------------------


def detection_to_dict(d: Detection) -> dict:
    return {
        "view": d.view,
        "index": d.index,
        "bbox": [float(x) for x in d.bbox],
        "joints": [[float(u), float(v)] for u, v in d.skeleton2d.joints],
        "valid": [bool(b) for b in d.skeleton2d.valid],
        "feature": [float(x) for x in d.feature],
        "score": float(d.score),
    }


def detection_from_dict(obj: dict, path: Path, n: int) -> Detection:
    where = f" in detection #{n}"
    try:
        return Detection(
            int(_field(obj, "view", path, where)),
            int(_field(obj, "index", path, where)),
            Skeleton2D(_field(obj, "joints", path, where), _field(obj, "valid", path, where)),
            _field(obj, "feature", path, where),
            obj.get("bbox", [0.0, 0.0, 0.0, 0.0]),
            score=float(obj.get("score", 1.0)),
        )
    except (TypeError, ValueError) as exc:
        raise IngestionError(f"{path}: detection #{n}: {exc}") from None


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def _indexed_dirs(root: Path, pattern: re.Pattern) -> dict[int, Path]:
    out = {}
    for p in root.iterdir():
        m = pattern.match(p.name)
        if m and p.is_dir():
            out[int(m.group(1))] = p
    return dict(sorted(out.items()))


def write_dataset(root: Path | str, bundles: list[FrameBundle], ground_truth: dict | None = None) -> None:
    """Write frames in the dataset layout; ``ground_truth`` is stored verbatim if given."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if not bundles:
        raise ValueError("no frames to write")
    for v, view in enumerate(bundles[0].views):
        dump_json(root / f"view_{v}" / "intrinsics.json", {
            "rgb": view.rgb_intrinsics.to_dict(),
            "depth": view.depth_intrinsics.to_dict(),
            "depth_to_rgb": view.depth_to_rgb.to_dict(),
        })
    for b in bundles:
        for v, view in enumerate(b.views):
            write_depth(root / f"view_{v}" / f"frame_{b.timestamp}.depth", view.depth)
        dump_json(root / f"frame_{b.timestamp}" / "detections.json", [detection_to_dict(d) for d in b.detections])
    if ground_truth is not None:
        dump_json(root / "ground_truth.json", ground_truth)


def _read_view(path: Path) -> tuple[CameraIntrinsics, CameraIntrinsics, RigidTransform]:
    obj = load_json(path)
    try:
        return (
            CameraIntrinsics.from_dict(_field(obj, "rgb", path)),
            CameraIntrinsics.from_dict(_field(obj, "depth", path)),
            RigidTransform.from_dict(_field(obj, "depth_to_rgb", path)),
        )
    except KeyError as exc:
        raise IngestionError(f"{path}: missing field {exc}") from None
    except (MvdError, TypeError, ValueError) as exc:
        if isinstance(exc, IngestionError):
            raise
        raise IngestionError(f"{path}: {exc}") from None


def ingest_dataset(root: Path | str) -> list[FrameBundle]:
    """Read and validate a dataset directory into FrameBundles in timestamp order.

    Raises:
        IngestionError: missing files, malformed JSON, a raster whose size
            disagrees with its intrinsics, or detections naming unknown views.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"{root}: dataset directory not found")
    view_dirs = _indexed_dirs(root, _VIEW_DIR)
    if not view_dirs:
        raise IngestionError(f"{root}: no view_<v> directories")
    if list(view_dirs) != list(range(len(view_dirs))):
        raise IngestionError(f"{root}: view indices {list(view_dirs)} are not contiguous from 0")
    views = [_read_view(view_dirs[v] / "intrinsics.json") for v in view_dirs]
    frame_dirs = _indexed_dirs(root, _FRAME_DIR)
    if not frame_dirs:
        raise IngestionError(f"{root}: no frame_<t> directories")
    bundles = []
    for t, fdir in frame_dirs.items():
        path = fdir / "detections.json"
        raw = load_json(path)
        if not isinstance(raw, list):
            raise IngestionError(f"{path}: expected a JSON array of detections")
        dets = [detection_from_dict(obj, path, n) for n, obj in enumerate(raw)]
        per_view: list[list[Detection]] = [[] for _ in views]
        for n, d in enumerate(dets):
            if not 0 <= d.view < len(views):
                raise IngestionError(f"{path}: detection #{n} references view {d.view} of {len(views)}")
            per_view[d.view].append(d)
        data = []
        for v, (rgb, dep, d2r) in enumerate(views):
            depth = read_depth(view_dirs[v] / f"frame_{t}.depth", dep)
            data.append(ViewData(rgb, dep, d2r, depth, per_view[v]))
        bundles.append(FrameBundle(data, t))
    return bundles


def dataset_hash(root: Path | str) -> str:
    """sha256 over the relative paths and bytes of every input file."""
    root = Path(root)
    h = hashlib.sha256()
    files = sorted(
        p for p in root.rglob("*")
        if p.is_file() and (p.suffix == ".depth" or p.name in ("intrinsics.json", "detections.json"))
    )
    for p in files:
        h.update(p.relative_to(root).as_posix().encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# stage outputs
# ---------------------------------------------------------------------------


def write_assignments(root: Path | str, timestamps: list[int], assignments: list[Assignment | None]) -> None:
    for t, a in zip(timestamps, assignments):
        dump_json(Path(root) / f"frame_{t}" / "assignment.json", {"clusters": None} if a is None else a.to_dict())


def read_assignments(root: Path | str, timestamps: list[int]) -> list[Assignment | None]:
    out = []
    for t in timestamps:
        path = Path(root) / f"frame_{t}" / "assignment.json"
        obj = load_json(path)
        clusters = _field(obj, "clusters", path)
        if clusters is None:
            out.append(None)
            continue
        try:
            out.append(Assignment.from_dict(obj))
        except (KeyError, TypeError, ValueError) as exc:
            raise IngestionError(f"{path}: bad cluster entry ({exc})") from None
    return out


def skeletons_to_dict(frame: int, skeletons: list[Skeleton3D]) -> dict:
    people = []
    for k, sk in enumerate(skeletons):
        people.append({
            "id": k,
            "joints": [[float(c) for c in p] if ok else None for p, ok in zip(sk.joints, sk.valid)],
            "valid": [bool(b) for b in sk.valid],
        })
    return {"frame": frame, "people": people}


def skeletons_from_dict(obj: dict, path: Path | str = "<memory>") -> list[Skeleton3D]:
    out = []
    for person in _field(obj, "people", Path(path)):
        valid = np.asarray(person["valid"], dtype=bool)
        joints = np.array([p if p is not None else [np.nan] * 3 for p in person["joints"]], dtype=np.float64)
        out.append(Skeleton3D(joints, valid, "world"))
    return out


def write_skeletons(root: Path | str, timestamps: list[int], skeletons: list[list[Skeleton3D]]) -> None:
    for t, sks in zip(timestamps, skeletons):
        dump_json(Path(root) / f"frame_{t}" / "skeletons.json", skeletons_to_dict(t, sks))


def read_skeletons(root: Path | str) -> dict[int, list[Skeleton3D]]:
    root = Path(root)
    out = {}
    for t, fdir in _indexed_dirs(root, _FRAME_DIR).items():
        path = fdir / "skeletons.json"
        if path.exists():
            try:
                out[t] = skeletons_from_dict(load_json(path), path)
            except (KeyError, TypeError, ValueError, MvdError) as exc:
                if isinstance(exc, IngestionError):
                    raise
                raise IngestionError(f"{path}: {exc}") from None
    return out
