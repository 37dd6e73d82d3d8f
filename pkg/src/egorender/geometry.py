"""Camera models and rigid transforms.

Two camera families are supported: an equidistant fisheye (``r = f * theta``)
used for the head-mounted egocentric view, and a plain pinhole camera used
for external viewpoints. Both store a world->camera transform with
``p_cam = R @ p_world + t``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

EPS_Z = 1e-6


class GeometryError(ValueError):
    pass


class OutOfFOVError(GeometryError):
    pass


def _as_rotation(mat) -> np.ndarray:
    r = np.asarray(mat, dtype=np.float64).reshape(3, 3)
    if not np.all(np.isfinite(r)):
        raise GeometryError("rotation has non-finite entries")
    if np.abs(r @ r.T - np.eye(3)).max() > 1e-5 or np.linalg.det(r) < 0:
        raise GeometryError("rotation must be orthonormal with determinant +1")
    return r


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _as_rotation(self.rotation))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return bool(np.allclose(r.T @ r, np.eye(3), atol=tol, rtol=0)
                    and abs(np.linalg.det(r) - 1.0) <= tol
                    and np.all(np.isfinite(self.translation)))

    def to_dict(self) -> dict:
        return {"rotation": [float(x) for x in self.rotation.reshape(-1)],
                "translation": [float(x) for x in self.translation]}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
                   np.asarray(d["translation"], dtype=np.float64))


def axis_angle_to_matrix(axis_angle) -> np.ndarray:
    """Rodrigues' formula for a rotation vector."""
    w = np.asarray(axis_angle, dtype=np.float64).reshape(3)
    theta = float(np.linalg.norm(w))
    if theta < 1e-12:
        k = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
        return np.eye(3) + k
    k = w / theta
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(theta) * kx + (1.0 - math.cos(theta)) * (kx @ kx)


def rotation_angle(r: np.ndarray) -> float:
    c = (np.trace(r) - 1.0) / 2.0
    return float(math.acos(min(1.0, max(-1.0, c))))


def orthonormalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> RigidTransform:
    """World->camera transform for a camera at ``eye`` looking at ``target``.

    Camera axes follow the image convention: x right, y down, z forward.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise GeometryError("look_at: eye and target coincide")
    fwd /= n
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        # looking straight along up; any perpendicular works
        right = np.cross(fwd, np.array([0.0, 0.0, 1.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])  # rows: camera axes in world coords
    return RigidTransform(rot, -rot @ eye)


@dataclass(frozen=True)
class FisheyeCamera:
    focal: float
    principal_point: Tuple[float, float]
    image_size: Tuple[int, int]
    pose: RigidTransform = field(default_factory=RigidTransform.identity)
    fov_max: float = math.pi / 2

    def __post_init__(self):
        if not self.focal > 0:
            raise GeometryError(f"fisheye focal must be positive, got {self.focal}")
        if not (0.0 < self.fov_max <= math.pi / 2 + 1e-15):
            raise GeometryError(f"fov_max must be in (0, pi/2], got {self.fov_max}")
        object.__setattr__(self, "principal_point", tuple(float(x) for x in self.principal_point))
        object.__setattr__(self, "image_size", tuple(int(x) for x in self.image_size))

    @property
    def fov_radius(self) -> float:
        return self.focal * self.fov_max

    def to_dict(self) -> dict:
        d = {"type": "fisheye", "focal": float(self.focal),
             "principal_point": list(self.principal_point),
             "image_size": list(self.image_size), "fov_max": float(self.fov_max)}
        d.update(self.pose.to_dict())
        return d


@dataclass(frozen=True)
class PinholeCamera:
    focal: Tuple[float, float]
    principal_point: Tuple[float, float]
    image_size: Tuple[int, int]
    pose: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        f = tuple(float(x) for x in np.broadcast_to(np.asarray(self.focal, dtype=np.float64), (2,)))
        if not (f[0] > 0 and f[1] > 0):
            raise GeometryError(f"pinhole focal must be positive, got {f}")
        object.__setattr__(self, "focal", f)
        object.__setattr__(self, "principal_point", tuple(float(x) for x in self.principal_point))
        object.__setattr__(self, "image_size", tuple(int(x) for x in self.image_size))

    def to_dict(self) -> dict:
        d = {"type": "pinhole", "focal": list(self.focal),
             "principal_point": list(self.principal_point),
             "image_size": list(self.image_size)}
        d.update(self.pose.to_dict())
        return d


Camera = Union[FisheyeCamera, PinholeCamera]


def camera_from_dict(d: dict) -> Camera:
    pose = RigidTransform.from_dict(d)
    kind = d.get("type")
    if kind == "fisheye":
        return FisheyeCamera(float(d["focal"]), tuple(d["principal_point"]), tuple(d["image_size"]),
                             pose, float(d.get("fov_max", math.pi / 2)))
    if kind == "pinhole":
        return PinholeCamera(tuple(d["focal"]), tuple(d["principal_point"]), tuple(d["image_size"]), pose)
    raise GeometryError(f"unknown camera type {kind!r}")


def save_camera(cam: Camera, path) -> None:
    Path(path).write_text(json.dumps(cam.to_dict(), indent=1))


def load_camera(path) -> Camera:
    return camera_from_dict(json.loads(Path(path).read_text()))


# --- fisheye --------------------------------------------------------------

def fisheye_project_many(points: np.ndarray, cam: FisheyeCamera, clip_fov: bool = True):
    """Vectorised equidistant projection of camera-space points.

    Returns ``(pixels (N,2), theta (N,), valid (N,))``. With ``clip_fov``
    off, points beyond ``fov_max`` still get a pixel (the formula extends to
    theta < pi), which the rasterizer uses for triangles straddling the rim.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rho = np.hypot(p[:, 0], p[:, 1])
    theta = np.arctan2(rho, p[:, 2])
    norm = np.sqrt(rho * rho + p[:, 2] * p[:, 2])
    safe = np.where(rho > 0, rho, 1.0)
    r = cam.focal * theta
    px = cam.principal_point[0] + r * np.where(rho > 0, p[:, 0] / safe, 0.0)
    py = cam.principal_point[1] + r * np.where(rho > 0, p[:, 1] / safe, 0.0)
    valid = norm > 0
    if clip_fov:
        valid &= theta <= cam.fov_max
    return np.stack([px, py], axis=1), theta, valid


def fisheye_project(point, cam: FisheyeCamera) -> Optional[np.ndarray]:
    p = np.asarray(point, dtype=np.float64).reshape(3)
    if not np.any(p):
        raise GeometryError("cannot project the camera centre")
    pix, _, valid = fisheye_project_many(p[None], cam)
    return pix[0] if valid[0] else None


def fisheye_unproject(pixel, cam: FisheyeCamera) -> np.ndarray:
    q = np.asarray(pixel, dtype=np.float64).reshape(2)
    dx = q[0] - cam.principal_point[0]
    dy = q[1] - cam.principal_point[1]
    r = math.hypot(dx, dy)
    if r > cam.fov_radius * (1 + 1e-12):
        raise OutOfFOVError(f"pixel radius {r:.6f} exceeds fov radius {cam.fov_radius:.6f}")
    theta = r / cam.focal
    if r == 0.0:
        return np.array([0.0, 0.0, 1.0])
    s = math.sin(theta)
    return np.array([s * dx / r, s * dy / r, math.cos(theta)])


# --- pinhole --------------------------------------------------------------

def pinhole_project_many(points: np.ndarray, cam: PinholeCamera):
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    z = p[:, 2]
    valid = z > EPS_Z
    zs = np.where(valid, z, 1.0)
    px = cam.focal[0] * p[:, 0] / zs + cam.principal_point[0]
    py = cam.focal[1] * p[:, 1] / zs + cam.principal_point[1]
    return np.stack([px, py], axis=1), z, valid


def pinhole_project(point, cam: PinholeCamera) -> Optional[Tuple[np.ndarray, float]]:
    pix, z, valid = pinhole_project_many(np.asarray(point, dtype=np.float64)[None], cam)
    if not valid[0]:
        return None
    return pix[0], float(z[0])


def project_world(points_world: np.ndarray, cam: Camera):
    """World points -> (pixels, depth, valid) for either camera type.

    Depth is the camera-space z for pinhole and the Euclidean distance to the
    camera centre for fisheye.
    """
    pc = cam.pose.apply(points_world)
    if isinstance(cam, FisheyeCamera):
        pix, _, valid = fisheye_project_many(pc, cam)
        return pix, np.linalg.norm(pc, axis=1), valid
    return pinhole_project_many(pc, cam)
