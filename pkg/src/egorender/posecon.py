"""Target pose images: fit the body to 15 joints and rasterize it from a chosen viewpoint."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from .body import (JOINT_INDEX, TARGET_NAMES, BodyMesh, BodyPose, JointTargets15, Skeleton,
                   forward_kinematics, solve_ik, world_transforms)
from .geometry import PinholeCamera, RigidTransform, axis_angle_to_matrix, project_world
from .raster import IUVImage, rasterize_body

LOCAL_GRID = 1e-7  # metres; local-mode joints are snapped to this grid after re-centring
DEFAULT_TARGET = (0.0, -0.1, 0.0)


class PoseConError(ValueError):
    pass


@dataclass
class PoseSource:
    """Where the 15 target joints come from: dataset ground truth or an estimator hook."""
    mode: str = "ground_truth"
    estimator: Optional[Callable[[np.ndarray], JointTargets15]] = None

    def __post_init__(self):
        if self.mode not in ("ground_truth", "estimator"):
            raise PoseConError(f"unknown pose source {self.mode!r}")
        if self.mode == "estimator" and self.estimator is None:
            raise PoseConError("estimator mode needs an estimator callable")

    def joints(self, ego_image: np.ndarray, gt: Optional[JointTargets15] = None) -> JointTargets15:
        if self.mode == "ground_truth":
            if gt is None:
                raise PoseConError("ground_truth pose source needs dataset joints")
            return gt
        out = self.estimator(ego_image)
        if tuple(out.names) != TARGET_NAMES:
            raise PoseConError("estimator must emit joints in the fixed 15-name order")
        return out


@dataclass
class ViewSpec:
    coords: str = "local"
    camera: Optional[PinholeCamera] = None
    azimuth: float = 0.0      # degrees, about +y, 0 looks at the subject's front
    elevation: float = 10.0   # degrees
    distance: float = 3.0
    size: int = 128
    focal: float = 160.0
    root: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if self.coords not in ("local", "global"):
            raise PoseConError(f"coordinate mode must be local or global, got {self.coords!r}")
        if self.camera is None and not self.distance > 0:
            raise PoseConError("view distance must be positive")

    def base_camera(self) -> PinholeCamera:
        """Camera in the subject frame (before the global root transform)."""
        if self.camera is not None:
            return self.camera
        from .synthgen import ring_camera
        return ring_camera(self.azimuth, self.elevation, self.distance, self.size, self.focal, DEFAULT_TARGET)


_VIEW_KEYS = {"az": "azimuth", "el": "elevation", "dist": "distance"}


def parse_view(text: str, **kw) -> ViewSpec:
    """``az=<deg>,el=<deg>,dist=<m>`` (any subset) -> ViewSpec."""
    vals = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        m = re.fullmatch(r"(\w+)=([-+0-9.eE]+)", item)
        if not m or m.group(1) not in _VIEW_KEYS:
            raise PoseConError(f"bad view item {item!r}; expected az=,el=,dist=")
        vals[_VIEW_KEYS[m.group(1)]] = float(m.group(2))
    return ViewSpec(**vals, **kw)


def canonical_joints(joints: JointTargets15) -> JointTargets15:
    """Re-centre at the hip midpoint, snap to a fixed grid, and rotate the hip line onto +x."""
    return _canonical_frame(joints)[0]


def _canonical_frame(joints: JointTargets15) -> Tuple[JointTargets15, np.ndarray]:
    joints.validate()
    idx = {n: i for i, n in enumerate(TARGET_NAMES)}
    p = joints.positions
    mid = 0.5 * (p[idx["l_hip"]] + p[idx["r_hip"]])
    q = np.round((p - mid) / LOCAL_GRID) * LOCAL_GRID
    hip = q[idx["l_hip"]] - q[idx["r_hip"]]
    yaw = math.atan2(-hip[2], hip[0])
    R = axis_angle_to_matrix([0.0, -yaw, 0.0])
    return JointTargets15(q @ R.T, joints.confidence.copy(), joints.names), R


def set_head_rotation(skel: Skeleton, pose: BodyPose, head_rotation: np.ndarray) -> BodyPose:
    """Pose whose head joint has world rotation ``head_rotation``.

    The 15 targets leave neck and head rotation free; the relative rotation
    from the neck's parent to the head is split evenly between the two joints.
    """
    n, h = JOINT_INDEX["neck"], JOINT_INDEX["head"]
    head_rotation = np.asarray(head_rotation, dtype=np.float64)
    if head_rotation.shape != (3, 3) or not np.all(np.isfinite(head_rotation)):
        raise PoseConError("head rotation must be a finite 3x3 matrix")
    rots, _ = world_transforms(skel, pose)
    rel = rots[skel.parents[n]].T @ head_rotation
    half = axis_angle_to_matrix(Rotation.from_matrix(rel).as_rotvec() / 2.0)
    out = pose.copy()
    out.rotations[n] = half
    out.rotations[h] = half.T @ rel
    return out


def construct_target_pose(joints: JointTargets15, view: ViewSpec, skel: Skeleton, mesh: BodyMesh,
                          head_rotation: Optional[np.ndarray] = None
                          ) -> Tuple[IUVImage, BodyPose, Optional[np.ndarray]]:
    """Fit the body to ``joints`` and rasterize it for ``view``.

    Local mode discards the joints' global placement (translation and yaw);
    global mode fits in the given frame and maps it to the world with the
    view's root transform, which is folded into the camera. ``head_rotation``
    (world rotation of the head, in the joints' frame) pins the head
    orientation, which the joints alone do not determine; with a head-mounted
    camera it follows from the camera pose.
    """
    if view.coords == "local":
        joints, R = _canonical_frame(joints)
        if head_rotation is not None:
            head_rotation = R @ np.asarray(head_rotation, dtype=np.float64)
        cam = view.base_camera()
    else:
        joints.validate()
        base = view.base_camera()
        cam = PinholeCamera(base.focal, base.principal_point, base.image_size, base.pose @ view.root)
    pose = solve_ik(skel, joints).pose
    if head_rotation is not None:
        pose = set_head_rotation(skel, pose, head_rotation)
    iuv = rasterize_body(skel, mesh, pose, cam)
    head = forward_kinematics(skel, pose)[JOINT_INDEX["head"]]
    pix, _, valid = project_world(head[None], cam)
    return iuv, pose, (pix[0] if valid[0] else None)
