"""Per-frame input containers shared by the simulator, I/O and pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ParameterError
from .geometry import CameraIntrinsics, DepthImage, RigidTransform, lift_skeleton, register_depth_to_rgb
from .matching import Detection


@dataclass(eq=False)
class ViewData:
    rgb_intrinsics: CameraIntrinsics
    depth_intrinsics: CameraIntrinsics
    depth_to_rgb: RigidTransform
    depth: DepthImage
    detections: list[Detection] = field(default_factory=list)

    def registered_depth(self) -> DepthImage:
        return register_depth_to_rgb(self.depth, self.rgb_intrinsics, self.depth_to_rgb)

    def lift_detections(self, window: int = 2) -> None:
        """Fill every detection's depth-lifted skeleton (RGB camera frame)."""
        reg = self.registered_depth()
        for det in self.detections:
            det.skeleton3d_lifted = lift_skeleton(det.skeleton2d, reg, window)


@dataclass(eq=False)
class FrameBundle:
    views: list[ViewData]
    timestamp: int = 0

    def __post_init__(self):
        for v, view in enumerate(self.views):
            for det in view.detections:
                if det.view != v:
                    raise ParameterError(f"detection ({det.view}, {det.index}) stored under view {v}")

    @property
    def num_views(self) -> int:
        return len(self.views)

    @property
    def detections(self) -> list[Detection]:
        return [d for view in self.views for d in view.detections]

    def lift_all(self, window: int = 2) -> "FrameBundle":
        for view in self.views:
            view.lift_detections(window)
        return self
