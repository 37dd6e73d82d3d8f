"""Synthetic egocentric + external-view dataset generator.

Every frame is generated from its own RNG stream derived from
``(seed, frame id)`` so frames can be produced in any order or in parallel.
Poses come from a smooth random walk over per-joint angle ranges; the walk
is organised in short clips, and a frame re-derives its clip's walk up to
its own index.
"""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np

from .atlas import AtlasLayout, TextureStack
from .body import (JOINT_INDEX, BodyConfig, BodyMesh, BodyPose, JointTargets15, Skeleton,
                   build_canonical_body, target_positions, world_transforms)
from .geometry import (Camera, FisheyeCamera, PinholeCamera, RigidTransform, axis_angle_to_matrix,
                       camera_from_dict, look_at, orthonormalize)
from .raster import IUVImage, feature_render, load_iuv, rasterize_body, read_iuv_array, save_iuv

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


# (joint, axis in the joint's rest frame, min deg, max deg)
_L_ARM = np.array([math.cos(math.radians(45)), -math.sin(math.radians(45)), 0.0])
_R_ARM = _L_ARM * [-1, 1, 1]
DEFAULT_DOFS: Tuple[Tuple[str, Tuple[float, float, float], float, float], ...] = (
    ("pelvis", (1, 0, 0), -10, 10), ("pelvis", (0, 0, 1), -10, 10),
    ("spine", (1, 0, 0), -15, 20), ("spine", (0, 1, 0), -30, 30), ("spine", (0, 0, 1), -15, 15),
    ("neck", (1, 0, 0), -10, 30), ("neck", (0, 1, 0), -30, 30),
    ("head", (1, 0, 0), -10, 30), ("head", (0, 1, 0), -40, 40), ("head", (0, 0, 1), -10, 10),
    ("l_shoulder", (0, 0, 1), -50, 60), ("l_shoulder", (1, 0, 0), -80, 30), ("l_shoulder", (0, 1, 0), -30, 30),
    ("r_shoulder", (0, 0, 1), -60, 50), ("r_shoulder", (1, 0, 0), -80, 30), ("r_shoulder", (0, 1, 0), -30, 30),
    ("l_elbow", tuple(np.cross(_L_ARM, [0, 0, 1]) / np.linalg.norm(np.cross(_L_ARM, [0, 0, 1]))), 0, 130),
    ("r_elbow", tuple(np.cross(_R_ARM, [0, 0, 1]) / np.linalg.norm(np.cross(_R_ARM, [0, 0, 1]))), 0, 130),
    ("l_wrist", (1, 0, 0), -30, 30), ("l_wrist", (0, 0, 1), -30, 30),
    ("r_wrist", (1, 0, 0), -30, 30), ("r_wrist", (0, 0, 1), -30, 30),
    ("l_hip", (1, 0, 0), -80, 25), ("l_hip", (0, 0, 1), -25, 25), ("l_hip", (0, 1, 0), -20, 20),
    ("r_hip", (1, 0, 0), -80, 25), ("r_hip", (0, 0, 1), -25, 25), ("r_hip", (0, 1, 0), -20, 20),
    ("l_knee", (1, 0, 0), 0, 120), ("r_knee", (1, 0, 0), 0, 120),
    ("l_ankle", (1, 0, 0), -20, 30), ("r_ankle", (1, 0, 0), -20, 30),
)


@dataclass
class PoseSamplerParams:
    dofs: Sequence[Tuple[str, Tuple[float, float, float], float, float]] = DEFAULT_DOFS
    range_scale: float = 1.0      # scales every angle range about zero
    yaw_range_deg: float = 180.0  # root yaw drawn from [-r, r]
    walk_sigma: float = 0.06      # walk step std as a fraction of each range width

    def ranges(self) -> np.ndarray:
        r = np.array([[lo, hi] for _, _, lo, hi in self.dofs], dtype=np.float64)
        return np.radians(r * self.range_scale)


def _pose_from_angles(params: PoseSamplerParams, angles: np.ndarray, yaw: float) -> BodyPose:
    pose = BodyPose.rest()
    for (name, axis, _, _), a in zip(params.dofs, angles):
        if a != 0.0:
            j = JOINT_INDEX[name]
            pose.rotations[j] = pose.rotations[j] @ axis_angle_to_matrix(np.asarray(axis, dtype=np.float64) * a)
    root = RigidTransform(axis_angle_to_matrix([0.0, yaw, 0.0]), np.zeros(3))
    pose.root = root
    return pose


def sample_pose(rng: np.random.Generator, params: Optional[PoseSamplerParams] = None) -> BodyPose:
    """One pose with every DOF angle uniform in its configured range."""
    params = params or PoseSamplerParams()
    r = params.ranges()
    angles = rng.uniform(r[:, 0], r[:, 1]) if len(r) else np.zeros(0)
    yaw_r = math.radians(params.yaw_range_deg * params.range_scale)
    yaw = float(rng.uniform(-yaw_r, yaw_r))
    return _pose_from_angles(params, angles, yaw)


def sample_pose_sequence(rng: np.random.Generator, n: int,
                         params: Optional[PoseSamplerParams] = None) -> List[BodyPose]:
    """Smooth random walk of ``n`` poses, reflected at the range limits."""
    params = params or PoseSamplerParams()
    r = params.ranges()
    lo, hi = r[:, 0], r[:, 1]
    width = hi - lo
    angles = rng.uniform(lo, hi)
    yaw_r = math.radians(params.yaw_range_deg * params.range_scale)
    yaw = float(rng.uniform(-yaw_r, yaw_r))
    out = []
    for _ in range(n):
        out.append(_pose_from_angles(params, angles, yaw))
        angles = angles + rng.normal(0.0, 1.0, len(angles)) * params.walk_sigma * width
        angles = np.where(angles > hi, 2 * hi - angles, angles)
        angles = np.where(angles < lo, 2 * lo - angles, angles)
        angles = np.clip(angles, lo, hi)
        yaw += float(rng.normal(0.0, 0.05)) * (yaw_r > 0)
    return out


# --- appearance ------------------------------------------------------------------

def _hsv_to_rgb(h, s, v) -> np.ndarray:
    hsv = np.array([[[h * 179.0, s * 255.0, v * 255.0]]], dtype=np.float32)
    return cv2.cvtColor(hsv.astype(np.uint8), cv2.COLOR_HSV2RGB)[0, 0].astype(np.float64) / 255.0


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    coarse = rng.uniform(-1.0, 1.0, (cells + 1, cells + 1))
    x = np.linspace(0, cells, size)
    i = np.minimum(np.floor(x).astype(int), cells - 1)
    f = x - i
    a = coarse[i][:, i] * (1 - f)[None, :] + coarse[i][:, i + 1] * f[None, :]
    b = coarse[i + 1][:, i] * (1 - f)[None, :] + coarse[i + 1][:, i + 1] * f[None, :]
    return a * (1 - f)[:, None] + b * f[:, None]


def sample_texture(seed: int, texture_id: int, layout: AtlasLayout) -> TextureStack:
    """Procedural RGB body texture, deterministic in ``(seed, texture_id)``."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7, texture_id]))
    S = layout.chart_size
    data = np.empty((layout.n_parts, S, S, 3))
    v, u = np.meshgrid(np.linspace(0, 1, S), np.linspace(0, 1, S), indexing="ij")
    for p in range(layout.n_parts):
        base = _hsv_to_rgb(rng.uniform(), rng.uniform(0.2, 0.9), rng.uniform(0.25, 0.95))
        stripe_col = _hsv_to_rgb(rng.uniform(), rng.uniform(0.2, 0.9), rng.uniform(0.25, 0.95))
        freq = rng.integers(1, 6)
        phase = rng.uniform(0, 2 * math.pi)
        coord = v if rng.uniform() < 0.6 else u
        amp = rng.uniform(0.0, 0.7)
        stripe = amp * (0.5 + 0.5 * np.sin(2 * math.pi * freq * coord + phase))
        noise = 0.08 * _smooth_noise(rng, S, 4)
        chart = base * (1 - stripe[..., None]) + stripe_col * stripe[..., None] + noise[..., None]
        data[p] = np.clip(chart, 0.0, 1.0)
    return TextureStack(data)


def sample_background(seed: int, background_id: int, width: int, height: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11, background_id]))
    c0 = _hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.6), rng.uniform(0.2, 0.9))
    c1 = _hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.6), rng.uniform(0.2, 0.9))
    ang = rng.uniform(0, 2 * math.pi)
    y, x = np.mgrid[0:height, 0:width]
    t = (math.cos(ang) * x / max(width - 1, 1) + math.sin(ang) * y / max(height - 1, 1))
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    img = c0 * (1 - t[..., None]) + c1 * t[..., None]
    n = _smooth_noise(rng, max(width, height), 6)[:height, :width]
    return np.clip(img + 0.06 * n[..., None], 0.0, 1.0)


def render_rgb(texture: TextureStack, iuv: IUVImage, background: np.ndarray) -> np.ndarray:
    fg = iuv.mask[..., None]
    return np.where(fg, feature_render(texture, iuv), background)


# --- cameras ---------------------------------------------------------------------

@dataclass
class GenConfig:
    n_frames: int = 2000
    n_textures: int = 8
    n_backgrounds: int = 16
    n_external_views: int = 4
    ego_size: int = 128
    view_size: int = 128
    seed: int = 0
    chart_size: int = 64
    parts: int = 10
    clip_length: int = 25
    pose_range_scale: float = 1.0
    walk_sigma: float = 0.06
    mount_forward: float = 0.16
    mount_up: float = 0.03
    mount_pitch_deg: float = 70.0
    ego_fov_max_deg: float = 90.0
    ring_radius: float = 3.0
    ring_height: float = 0.3
    ring_azimuth_offset_deg: float = 0.0
    view_focal: float = 160.0
    split: float = 0.8

    def validate(self) -> None:
        if self.n_frames <= 0:
            raise DatasetError("n_frames must be positive")
        if not 0.0 < self.split < 1.0:
            raise DatasetError("split must lie in (0, 1)")
        for k in ("n_textures", "n_backgrounds", "ego_size", "view_size", "chart_size", "clip_length"):
            if getattr(self, k) <= 0:
                raise DatasetError(f"{k} must be positive")
        if self.n_external_views < 0:
            raise DatasetError("n_external_views must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DatasetError(f"unknown gen config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def layout(self) -> AtlasLayout:
        return AtlasLayout(self.parts, self.chart_size)

    def sampler(self) -> PoseSamplerParams:
        return PoseSamplerParams(range_scale=self.pose_range_scale, walk_sigma=self.walk_sigma)

    def n_train(self) -> int:
        return int(round(self.n_frames * self.split))


def ego_camera(skel: Skeleton, pose: BodyPose, cfg: GenConfig) -> FisheyeCamera:
    """Fisheye camera rigidly mounted in front of the head, pitched down."""
    rots, pos = world_transforms(skel, pose)
    h = JOINT_INDEX["head"]
    R = rots[h]
    centre = pos[h] + R @ np.array([0.0, cfg.mount_up, cfg.mount_forward])
    pitch = math.radians(cfg.mount_pitch_deg)
    fwd = R @ np.array([0.0, -math.sin(pitch), math.cos(pitch)])
    right = R @ np.array([-1.0, 0.0, 0.0])
    right -= (right @ fwd) * fwd
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    fov = math.radians(cfg.ego_fov_max_deg)
    size = cfg.ego_size
    focal = (size / 2.0) / fov
    c = (size - 1) / 2.0
    return FisheyeCamera(focal, (c, c), (size, size), RigidTransform(rot, -rot @ centre), fov)


def head_rotation_from_ego(cam: FisheyeCamera, cfg: GenConfig) -> np.ndarray:
    """World rotation of the head joint implied by a head-mounted ego camera (inverse of the mount)."""
    pitch = math.radians(cfg.mount_pitch_deg)
    right_l = np.array([-1.0, 0.0, 0.0])
    fwd_l = np.array([0.0, -math.sin(pitch), math.cos(pitch)])
    local = np.stack([right_l, fwd_l, np.cross(fwd_l, right_l)], axis=1)
    rot = cam.pose.rotation
    world = np.stack([rot[0], rot[2], rot[1]], axis=1)
    return orthonormalize(world @ local.T)


def fisheye_disc(cam: FisheyeCamera) -> np.ndarray:
    """Boolean image of pixels inside the fisheye image circle."""
    W, H = cam.image_size
    y, x = np.mgrid[0:H, 0:W]
    cx, cy = cam.principal_point
    return (x - cx) ** 2 + (y - cy) ** 2 <= cam.fov_radius ** 2


def ring_camera(azimuth_deg: float, elevation_deg: float, distance: float, size: int, focal: float,
                target=(0.0, -0.1, 0.0)) -> PinholeCamera:
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    target = np.asarray(target, dtype=np.float64)
    eye = target + distance * np.array([math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)])
    c = (size - 1) / 2.0
    return PinholeCamera((focal, focal), (c, c), (size, size), look_at(eye, target))


def ring_cameras(cfg: GenConfig) -> List[PinholeCamera]:
    el = math.degrees(math.atan2(cfg.ring_height + 0.1, cfg.ring_radius))
    dist = math.hypot(cfg.ring_radius, cfg.ring_height + 0.1)
    return [ring_camera(cfg.ring_azimuth_offset_deg + 360.0 * k / cfg.n_external_views, el, dist,
                        cfg.view_size, cfg.view_focal) for k in range(cfg.n_external_views)]


# --- generation ------------------------------------------------------------------

_BODY_CACHE: Dict[int, Tuple[Skeleton, BodyMesh]] = {}


def body_for(cfg: GenConfig) -> Tuple[Skeleton, BodyMesh]:
    if cfg.parts not in _BODY_CACHE:
        _BODY_CACHE[cfg.parts] = build_canonical_body(BodyConfig(parts=cfg.parts))
    return _BODY_CACHE[cfg.parts]


def frame_pose(cfg: GenConfig, frame_id: int) -> BodyPose:
    clip, k = divmod(frame_id, cfg.clip_length)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, clip]))
    return sample_pose_sequence(rng, k + 1, cfg.sampler())[k]


def frame_choices(cfg: GenConfig, frame_id: int) -> Tuple[int, int]:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, frame_id]))
    return int(rng.integers(cfg.n_textures)), int(rng.integers(cfg.n_backgrounds))


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_rgb(path, img: np.ndarray) -> None:
    arr = to_uint8(img) if img.dtype != np.uint8 else img
    if arr.ndim == 3:
        arr = arr[..., ::-1]
    _atomic_write(path, lambda tmp: cv2.imwrite(str(tmp), arr))


def load_rgb(path) -> np.ndarray:
    arr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if arr is None:
        raise FileNotFoundError(path)
    return np.ascontiguousarray(arr[..., ::-1]).astype(np.float64) / 255.0


def _atomic_write(path, writer) -> None:
    path = Path(path)
    tmp = path.with_name(".tmp-" + path.name)
    ok = writer(tmp)
    if ok is False:
        raise DatasetError(f"could not write {path}")
    os.replace(tmp, path)


def _write_json(path, obj) -> None:
    def w(tmp):
        Path(tmp).write_text(json.dumps(obj, indent=1, sort_keys=True))
    _atomic_write(path, w)


def render_frame(cfg: GenConfig, frame_id: int):
    """All rendered content of one frame, in memory."""
    skel, mesh = body_for(cfg)
    pose = frame_pose(cfg, frame_id)
    tex_id, bg_id = frame_choices(cfg, frame_id)
    texture = sample_texture(cfg.seed, tex_id, cfg.layout)
    ego_cam = ego_camera(skel, pose, cfg)
    ego_iuv = rasterize_body(skel, mesh, pose, ego_cam)
    ego_bg = sample_background(cfg.seed, bg_id, cfg.ego_size, cfg.ego_size)
    ego = render_rgb(texture, ego_iuv, ego_bg) * fisheye_disc(ego_cam)[..., None]
    views = []
    view_bg = sample_background(cfg.seed, bg_id, cfg.view_size, cfg.view_size)
    for cam in ring_cameras(cfg):
        iuv = rasterize_body(skel, mesh, pose, cam)
        views.append((render_rgb(texture, iuv, view_bg), iuv, cam))
    return {"pose": pose, "joints": target_positions(skel, pose), "texture_id": tex_id,
            "background_id": bg_id, "ego": ego, "ego_iuv": ego_iuv, "ego_camera": ego_cam,
            "views": views}


def write_frame(cfg: GenConfig, frame_id: int, out_dir) -> str:
    fr = render_frame(cfg, frame_id)
    d = Path(out_dir) / "frames" / f"{frame_id:06d}"
    d.mkdir(parents=True, exist_ok=True)
    save_rgb(d / "ego.png", fr["ego"])
    _atomic_write(d / "ego_iuv.png", lambda tmp: save_iuv(tmp, fr["ego_iuv"]))
    _write_json(d / "ego_camera.json", fr["ego_camera"].to_dict())
    _write_json(d / "pose.json", {
        "frame_id": frame_id, "texture_id": fr["texture_id"], "background_id": fr["background_id"],
        "pose": fr["pose"].to_dict(),
        "joints15": JointTargets15(fr["joints"]).to_dict(),
    })
    for k, (img, iuv, cam) in enumerate(fr["views"]):
        vd = d / "views" / str(k)
        vd.mkdir(parents=True, exist_ok=True)
        save_rgb(vd / "img.png", img)
        _atomic_write(vd / "iuv.png", lambda tmp: save_iuv(tmp, iuv))
        save_rgb(vd / "mask.png", (iuv.mask * 255).astype(np.uint8))
        _write_json(vd / "camera.json", cam.to_dict())
    return d.name


def _worker(args):
    cfg_dict, frame_id, out_dir = args
    return write_frame(GenConfig(**cfg_dict), frame_id, out_dir)


def generate_dataset(cfg: GenConfig, out_dir, workers: int = 1) -> dict:
    """Render ``cfg.n_frames`` frames under ``out_dir`` and write ``meta.json`` last."""
    cfg.validate()
    out = Path(out_dir)
    try:
        (out / "frames").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"cannot create dataset directory {out}: {e}") from e
    if not os.access(out, os.W_OK):
        raise DatasetError(f"dataset directory {out} is not writable")
    jobs = [(asdict(cfg), i, str(out)) for i in range(cfg.n_frames)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            names = list(ex.map(_worker, jobs, chunksize=8))
    else:
        names = [_worker(j) for j in jobs]
    n_train = cfg.n_train()
    skel, mesh = body_for(cfg)
    meta = {
        "format": "egorender-dataset", "version": 1,
        "gen_config": asdict(cfg),
        "body_config": asdict(BodyConfig(parts=cfg.parts)),
        "atlas": cfg.layout.to_dict(),
        "camera_defaults": {"ego": {"fov_max_deg": cfg.ego_fov_max_deg, "size": cfg.ego_size,
                                    "mount_forward": cfg.mount_forward, "mount_up": cfg.mount_up,
                                    "mount_pitch_deg": cfg.mount_pitch_deg},
                            "ring": [c.to_dict() for c in ring_cameras(cfg)]},
        "records": names,
        "split": {"train": list(range(n_train)), "test": list(range(n_train, cfg.n_frames))},
    }
    _write_json(out / "meta.json", meta)
    return meta


# --- reading -----------------------------------------------------------------------

@dataclass
class ViewRecord:
    image: np.ndarray
    iuv: IUVImage
    mask: np.ndarray
    camera: PinholeCamera


@dataclass
class SampleRecord:
    frame_id: int
    ego: np.ndarray
    ego_iuv: IUVImage
    ego_camera: FisheyeCamera
    pose: BodyPose
    joints: JointTargets15
    texture_id: int
    background_id: int
    views: List[ViewRecord] = field(default_factory=list)


class Dataset:
    def __init__(self, root):
        self.root = Path(root)
        meta_path = self.root / "meta.json"
        if not meta_path.exists():
            raise DatasetError(f"{self.root} has no meta.json (not a generated dataset)")
        self.meta = json.loads(meta_path.read_text())
        self.cfg = GenConfig.from_dict(self.meta["gen_config"])

    def __len__(self) -> int:
        return len(self.meta["records"])

    @property
    def train_ids(self) -> List[int]:
        return list(self.meta["split"]["train"])

    @property
    def test_ids(self) -> List[int]:
        return list(self.meta["split"]["test"])

    @property
    def layout(self) -> AtlasLayout:
        return self.cfg.layout

    def frame_dir(self, frame_id: int) -> Path:
        return self.root / "frames" / self.meta["records"][frame_id]

    def body(self) -> Tuple[Skeleton, BodyMesh]:
        return build_canonical_body(BodyConfig.from_dict(self.meta["body_config"]))

    def background(self, background_id: int, which: str = "view") -> np.ndarray:
        size = self.cfg.view_size if which == "view" else self.cfg.ego_size
        return sample_background(self.cfg.seed, background_id, size, size)

    def load_meta(self, frame_id: int) -> dict:
        return json.loads((self.frame_dir(frame_id) / "pose.json").read_text())

    def load(self, frame_id: int, views: Optional[Sequence[int]] = None) -> SampleRecord:
        d = self.frame_dir(frame_id)
        pm = self.load_meta(frame_id)
        view_ids = range(self.cfg.n_external_views) if views is None else views
        vrecs = []
        for k in view_ids:
            vd = d / "views" / str(k)
            vrecs.append(ViewRecord(load_rgb(vd / "img.png"), load_iuv(vd / "iuv.png"),
                                    load_rgb(vd / "mask.png")[..., 0] > 0.5,
                                    camera_from_dict(json.loads((vd / "camera.json").read_text()))))
        return SampleRecord(
            frame_id, load_rgb(d / "ego.png"), load_iuv(d / "ego_iuv.png"),
            camera_from_dict(json.loads((d / "ego_camera.json").read_text())),
            BodyPose.from_dict(pm["pose"]), JointTargets15.from_dict(pm["joints15"]),
            pm["texture_id"], pm["background_id"], vrecs)

    def ego_iuv_array(self, frame_id: int) -> np.ndarray:
        return read_iuv_array(self.frame_dir(frame_id) / "ego_iuv.png")

    def view_iuv_array(self, frame_id: int, view: int) -> np.ndarray:
        return read_iuv_array(self.frame_dir(frame_id) / "views" / str(view) / "iuv.png")
