"""Procedural parametric body: skeleton, capsule mesh, skinning and IK.

The body is a stand-in for a licensed statistical model. Every limb segment
is a capsule whose surface is parameterised by (angle around the axis,
arc length along the meridian); that parameterisation doubles as the
per-part UV chart, so each part's chart is covered bijectively.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .container import read_container, write_container
from .geometry import RigidTransform, axis_angle_to_matrix, orthonormalize

JOINT_NAMES = (
    "pelvis", "spine", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle", "l_toe",
    "r_hip", "r_knee", "r_ankle", "r_toe",
)
JOINT_INDEX = {n: i for i, n in enumerate(JOINT_NAMES)}

# Observed joint set of the egocentric pose estimator, in its output order.
TARGET_NAMES = (
    "neck", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist",
    "l_hip", "r_hip", "l_knee", "r_knee", "l_ankle", "r_ankle", "l_toe", "r_toe",
)
TARGET_JOINTS = np.array([JOINT_INDEX[n] for n in TARGET_NAMES])
# chart seams are placed on the side of each capsule facing this (unit) direction: down and back
SEAM_DIRECTION = np.array([0.0, -1.0, -1.0]) / np.sqrt(2.0)


class BodyError(ValueError):
    pass


@dataclass
class BodyConfig:
    spine_length: float = 0.25
    neck_length: float = 0.24
    head_length: float = 0.11
    shoulder_offset: float = 0.17
    shoulder_height: float = 0.21
    upper_arm: float = 0.28
    forearm: float = 0.25
    arm_droop_deg: float = 45.0
    hip_offset: float = 0.09
    hip_drop: float = 0.06
    thigh: float = 0.42
    shin: float = 0.42
    foot: float = 0.14
    hand: float = 0.09
    r_head: float = 0.095
    r_torso: float = 0.14
    torso_depth_scale: float = 0.7
    r_upper_arm: float = 0.045
    r_forearm: float = 0.038
    r_thigh: float = 0.065
    r_shin: float = 0.05
    r_hand: float = 0.035
    r_foot: float = 0.04
    parts: int = 10
    edge_bound: float = 0.05
    density: float = 1.0

    @classmethod
    def from_dict(cls, d: dict) -> "BodyConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise BodyError(f"unknown body config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Skeleton:
    names: Tuple[str, ...]
    parents: np.ndarray  # (J,) int, -1 for root
    offsets: np.ndarray  # (J,3) rest offset from parent (root: absolute)

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=np.int64)
        if int((parents < 0).sum()) != 1 or parents[0] != -1:
            raise BodyError("skeleton needs exactly one root at index 0")
        if np.any(parents[1:] >= np.arange(1, len(parents))):
            raise BodyError("parents must precede children")
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "offsets", np.asarray(self.offsets, dtype=np.float64))

    @property
    def n_joints(self) -> int:
        return len(self.names)

    def rest_positions(self) -> np.ndarray:
        pos = np.zeros((self.n_joints, 3))
        for j, p in enumerate(self.parents):
            pos[j] = self.offsets[j] if p < 0 else pos[p] + self.offsets[j]
        return pos

    def scaled(self, s: float) -> "Skeleton":
        return Skeleton(self.names, self.parents, self.offsets * s)

    def ancestors(self) -> np.ndarray:
        """(J,J) bool, ``a[j, i]`` true when j is a strict ancestor of i."""
        J = self.n_joints
        a = np.zeros((J, J), dtype=bool)
        for i in range(J):
            p = self.parents[i]
            while p >= 0:
                a[p, i] = True
                p = self.parents[p]
        return a


@dataclass
class BodyPose:
    root: RigidTransform
    rotations: np.ndarray  # (J,3,3) local rotations

    @classmethod
    def rest(cls, n_joints: int = len(JOINT_NAMES)) -> "BodyPose":
        return cls(RigidTransform.identity(), np.tile(np.eye(3), (n_joints, 1, 1)))

    def copy(self) -> "BodyPose":
        return BodyPose(RigidTransform(self.root.rotation.copy(), self.root.translation.copy()),
                        self.rotations.copy())

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotations
        eye = np.einsum("jba,jbc->jac", r, r)
        return (self.root.is_valid(tol)
                and bool(np.all(np.abs(eye - np.eye(3)) <= tol))
                and bool(np.all(np.abs(np.linalg.det(r) - 1.0) <= tol)))

    def to_dict(self) -> dict:
        return {"root": self.root.to_dict(),
                "rotations": [[float(x) for x in r.reshape(-1)] for r in self.rotations]}

    @classmethod
    def from_dict(cls, d: dict) -> "BodyPose":
        rots = np.asarray(d["rotations"], dtype=np.float64).reshape(-1, 3, 3)
        return cls(RigidTransform.from_dict(d["root"]), rots)


@dataclass
class JointTargets15:
    positions: np.ndarray  # (15,3)
    confidence: np.ndarray = field(default_factory=lambda: np.ones(15))
    names: Tuple[str, ...] = TARGET_NAMES

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(15, 3)
        self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(15)
        if tuple(self.names) != TARGET_NAMES:
            raise BodyError(f"joint targets must use the fixed order {TARGET_NAMES}")

    def validate(self) -> None:
        if not np.all(np.isfinite(self.positions)) or not np.all(np.isfinite(self.confidence)):
            raise BodyError("joint targets contain non-finite values")
        if np.any(self.confidence < 0) or np.any(self.confidence > 1):
            raise BodyError("joint confidences must lie in [0, 1]")

    def translated(self, offset) -> "JointTargets15":
        return JointTargets15(self.positions + np.asarray(offset, dtype=np.float64), self.confidence.copy())

    def to_dict(self) -> dict:
        return {"names": list(self.names), "positions": self.positions.tolist(),
                "confidence": self.confidence.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "JointTargets15":
        names = tuple(d.get("names", TARGET_NAMES))
        return cls(d["positions"], d.get("confidence", np.ones(15)), names)


@dataclass
class BodyMesh:
    vertices: np.ndarray      # (V,3) rest pose
    faces: np.ndarray         # (F,3) int32, outward CCW winding
    skin_joints: np.ndarray   # (V,4) int32
    skin_weights: np.ndarray  # (V,4) float64
    vertex_part: np.ndarray   # (V,) int32 in 1..P
    vertex_uv: np.ndarray     # (V,2)
    n_parts: int
    edge_bound: float = 0.05
    vertex_segment: Optional[np.ndarray] = None  # (V,) segment index (diagnostics)
    vertex_axial: Optional[np.ndarray] = None    # (V,) axial fraction along segment
    segment_names: Tuple[str, ...] = ()

    @property
    def face_part(self) -> np.ndarray:
        return self.vertex_part[self.faces[:, 0]]

    def dense_weights(self, n_joints: int) -> np.ndarray:
        w = np.zeros((len(self.vertices), n_joints))
        rows = np.repeat(np.arange(len(self.vertices)), 4)
        np.add.at(w, (rows, self.skin_joints.reshape(-1)), self.skin_weights.reshape(-1))
        return w

    def edge_lengths(self, vertices: Optional[np.ndarray] = None) -> np.ndarray:
        v = self.vertices if vertices is None else vertices
        f = self.faces
        e = np.concatenate([v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 1]], v[f[:, 0]] - v[f[:, 2]]])
        return np.linalg.norm(e, axis=1)

    def check_invariants(self) -> List[str]:
        problems = []
        w = self.skin_weights
        if np.any(w < 0):
            problems.append("negative skin weight")
        if np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-9):
            problems.append("skin weights do not sum to 1")
        fp = self.vertex_part[self.faces]
        if np.any(fp != fp[:, :1]):
            problems.append("face spans several parts")
        if self.vertex_part.min(initial=1) < 1 or self.vertex_part.max(initial=1) > self.n_parts:
            problems.append("part index out of range")
        if np.any(self.vertex_uv < 0) or np.any(self.vertex_uv > 1):
            problems.append("uv outside [0,1]")
        if len(self.faces) and self.edge_lengths().max() > self.edge_bound:
            problems.append(f"edge longer than bound {self.edge_bound}")
        return problems


# --- construction -----------------------------------------------------------

@dataclass
class _Segment:
    name: str
    a: np.ndarray
    b: np.ndarray
    radius: float
    knots: Sequence[Tuple[float, int]]  # (axial fraction, joint) weight knots
    sectors: int
    depth_scale: float = 1.0  # squash along the forward axis (elliptic section)


def build_skeleton(cfg: BodyConfig) -> Skeleton:
    droop = math.radians(cfg.arm_droop_deg)
    arm_dir = np.array([math.cos(droop), -math.sin(droop), 0.0])
    off = {
        "pelvis": (0.0, 0.0, 0.0),
        "spine": (0.0, cfg.spine_length, 0.0),
        "neck": (0.0, cfg.neck_length, 0.0),
        "head": (0.0, cfg.head_length, 0.0),
        "l_shoulder": (cfg.shoulder_offset, cfg.shoulder_height, 0.0),
        "l_elbow": tuple(arm_dir * cfg.upper_arm),
        "l_wrist": tuple(arm_dir * cfg.forearm),
        "r_shoulder": (-cfg.shoulder_offset, cfg.shoulder_height, 0.0),
        "r_elbow": tuple(arm_dir * [-1, 1, 1] * cfg.upper_arm),
        "r_wrist": tuple(arm_dir * [-1, 1, 1] * cfg.forearm),
        "l_hip": (cfg.hip_offset, -cfg.hip_drop, 0.0),
        "l_knee": (0.0, -cfg.thigh, 0.0),
        "l_ankle": (0.0, -cfg.shin, 0.0),
        "l_toe": (0.0, -0.05, cfg.foot),
        "r_hip": (-cfg.hip_offset, -cfg.hip_drop, 0.0),
        "r_knee": (0.0, -cfg.thigh, 0.0),
        "r_ankle": (0.0, -cfg.shin, 0.0),
        "r_toe": (0.0, -0.05, cfg.foot),
    }
    parent_name = {
        "pelvis": None, "spine": "pelvis", "neck": "spine", "head": "neck",
        "l_shoulder": "spine", "l_elbow": "l_shoulder", "l_wrist": "l_elbow",
        "r_shoulder": "spine", "r_elbow": "r_shoulder", "r_wrist": "r_elbow",
        "l_hip": "pelvis", "l_knee": "l_hip", "l_ankle": "l_knee", "l_toe": "l_ankle",
        "r_hip": "pelvis", "r_knee": "r_hip", "r_ankle": "r_knee", "r_toe": "r_ankle",
    }
    parents = [-1 if parent_name[n] is None else JOINT_INDEX[parent_name[n]] for n in JOINT_NAMES]
    offsets = np.array([off[n] for n in JOINT_NAMES], dtype=np.float64)
    return Skeleton(JOINT_NAMES, np.array(parents), offsets)


def _segments(cfg: BodyConfig, rest: np.ndarray) -> List[_Segment]:
    J = JOINT_INDEX
    if cfg.parts == 10:
        split, extremities = 1, False
    elif cfg.parts == 24:
        split, extremities = 2, True
    else:
        raise BodyError(f"parts must be 10 or 24, got {cfg.parts}")
    up = np.array([0.0, 1.0, 0.0])
    segs = [
        _Segment("head", rest[J["head"]] - 0.04 * up, rest[J["head"]] + 0.06 * up, cfg.r_head,
                 [(-0.6, J["neck"]), (0.1, J["head"])], split),
        _Segment("torso", rest[J["pelvis"]], rest[J["neck"]], cfg.r_torso,
                 [(0.15, J["pelvis"]), (0.5, J["spine"]), (0.95, J["spine"]), (1.15, J["neck"])], split,
                 cfg.torso_depth_scale),
    ]
    for side in ("l", "r"):
        sh, el, wr = J[f"{side}_shoulder"], J[f"{side}_elbow"], J[f"{side}_wrist"]
        segs.append(_Segment(f"{side}_upper_arm", rest[sh], rest[el], cfg.r_upper_arm,
                             [(-0.15, J["spine"]), (0.15, sh), (0.85, sh), (1.15, el)], split))
        segs.append(_Segment(f"{side}_forearm", rest[el], rest[wr], cfg.r_forearm,
                             [(-0.15, sh), (0.15, el), (0.9, el), (1.2, wr)], split))
    for side in ("l", "r"):
        hp, kn, an = J[f"{side}_hip"], J[f"{side}_knee"], J[f"{side}_ankle"]
        segs.append(_Segment(f"{side}_thigh", rest[hp], rest[kn], cfg.r_thigh,
                             [(-0.15, J["pelvis"]), (0.15, hp), (0.85, hp), (1.15, kn)], split))
        segs.append(_Segment(f"{side}_shin", rest[kn], rest[an], cfg.r_shin,
                             [(-0.15, hp), (0.15, kn), (0.9, kn), (1.2, an)], split))
    if extremities:
        for side in ("l", "r"):
            wr, el = J[f"{side}_wrist"], J[f"{side}_elbow"]
            d = rest[wr] - rest[el]
            d /= np.linalg.norm(d)
            segs.append(_Segment(f"{side}_hand", rest[wr] + d * cfg.r_hand, rest[wr] + d * cfg.hand,
                                 cfg.r_hand, [(0.0, wr)], 1))
        for side in ("l", "r"):
            an, to = J[f"{side}_ankle"], J[f"{side}_toe"]
            segs.append(_Segment(f"{side}_foot", rest[an] + np.array([0, -0.03, 0.02]), rest[to],
                                 cfg.r_foot, [(0.0, an)], 1))
    return segs


def _knot_weights(t: np.ndarray, knots: Sequence[Tuple[float, int]]):
    """Piecewise-linear blend between consecutive knot joints; <=2 joints per vertex."""
    ts = np.array([k[0] for k in knots])
    js = np.array([k[1] for k in knots])
    n = len(t)
    joints = np.zeros((n, 4), dtype=np.int32)
    weights = np.zeros((n, 4))
    idx = np.searchsorted(ts, t, side="right")  # knot interval
    for i in range(n):
        k = idx[i]
        if k == 0:
            joints[i, 0], weights[i, 0] = js[0], 1.0
        elif k >= len(ts):
            joints[i, 0], weights[i, 0] = js[-1], 1.0
        else:
            a = (t[i] - ts[k - 1]) / (ts[k] - ts[k - 1])
            if js[k - 1] == js[k] or a <= 0.0:
                joints[i, 0], weights[i, 0] = js[k - 1], 1.0
            else:
                joints[i, 0], weights[i, 0] = js[k - 1], 1.0 - a
                joints[i, 1], weights[i, 1] = js[k], a
    # exact partition of unity for two-way blends
    weights[:, 1] = np.where(weights[:, 1] > 0, 1.0 - weights[:, 0], 0.0)
    return joints, weights


def build_canonical_body(cfg: Optional[BodyConfig] = None) -> Tuple[Skeleton, BodyMesh]:
    cfg = cfg or BodyConfig()
    lengths = [cfg.spine_length, cfg.neck_length, cfg.head_length, cfg.upper_arm, cfg.forearm,
               cfg.thigh, cfg.shin, cfg.foot, cfg.hand]
    radii = [cfg.r_head, cfg.r_torso, cfg.r_upper_arm, cfg.r_forearm, cfg.r_thigh, cfg.r_shin,
             cfg.r_hand, cfg.r_foot]
    if (min(lengths) <= 0 or min(radii) <= 0 or cfg.density <= 0 or cfg.edge_bound <= 0
            or not 0 < cfg.torso_depth_scale <= 1):
        raise BodyError("body proportions, radii, density and edge bound must be positive")
    skel = build_skeleton(cfg)
    rest = skel.rest_positions()
    # quad diagonals are at most sqrt(2) * step
    step = 0.98 * cfg.edge_bound / math.sqrt(2.0) / cfg.density

    verts, faces, sj, sw, vpart, vuv, vseg, vax = [], [], [], [], [], [], [], []
    part = 0
    base = 0
    segs = _segments(cfg, rest)
    for si, seg in enumerate(segs):
        axis = seg.b - seg.a
        L = float(np.linalg.norm(axis))
        d = axis / L
        # the angular seam (and sector start) faces down-back, away from a head-mounted camera
        ref = SEAM_DIRECTION
        if abs(d @ ref) > 0.95:
            ref = np.array([0.0, 0.0, -1.0]) if abs(d[2]) < 0.95 else np.array([0.0, -1.0, 0.0])
        e1 = ref - (ref @ d) * d
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(d, e1)
        R = seg.radius
        M = math.pi * R + L
        n_along = max(2, math.ceil(M / step))
        n_around = max(3 * seg.sectors, math.ceil(2 * math.pi * R / step))
        n_sec = math.ceil(n_around / seg.sectors)
        s = np.linspace(0.0, M, n_along + 1)
        q1, q2 = math.pi * R / 2, math.pi * R / 2 + L
        axial = np.where(s < q1, -R * np.cos(s / R),
                         np.where(s <= q2, s - q1, L + R * np.sin((s - q2) / R)))
        rad = np.where(s < q1, R * np.sin(s / R),
                       np.where(s <= q2, R, R * np.cos((s - q2) / R)))
        rad[0] = rad[-1] = 0.0
        for k in range(seg.sectors):
            part += 1
            th = (k + np.linspace(0.0, 1.0, n_sec + 1)) * (2 * math.pi / seg.sectors)
            S, T = np.meshgrid(np.arange(n_along + 1), np.arange(n_sec + 1), indexing="ij")
            ax = axial[S]
            rr = rad[S]
            ang = th[T]
            pos = (seg.a + ax[..., None] * d
                   + rr[..., None] * (seg.depth_scale * np.cos(ang)[..., None] * e1
                                      + np.sin(ang)[..., None] * e2))
            verts.append(pos.reshape(-1, 3))
            uv = np.stack([T / n_sec, S / n_along], axis=-1).reshape(-1, 2).astype(np.float64)
            vuv.append(uv)
            vpart.append(np.full(uv.shape[0], part, dtype=np.int32))
            tfrac = (ax / L).reshape(-1)
            vax.append(tfrac)
            vseg.append(np.full(uv.shape[0], si, dtype=np.int32))
            j, w = _knot_weights(tfrac, seg.knots)
            sj.append(j)
            sw.append(w)
            idx = base + (S * (n_sec + 1) + T)
            v00 = idx[:-1, :-1].reshape(-1)
            v01 = idx[:-1, 1:].reshape(-1)
            v10 = idx[1:, :-1].reshape(-1)
            v11 = idx[1:, 1:].reshape(-1)
            # winding chosen so normals point away from the axis (checked below)
            f = np.concatenate([np.stack([v00, v10, v11], 1), np.stack([v00, v11, v01], 1)])
            faces.append(f)
            base += uv.shape[0]
    V = np.concatenate(verts)
    F = np.concatenate(faces).astype(np.int32)
    # drop triangles collapsed at the poles
    cr = np.cross(V[F[:, 1]] - V[F[:, 0]], V[F[:, 2]] - V[F[:, 0]])
    F = F[np.linalg.norm(cr, axis=1) > 1e-12]
    mesh = BodyMesh(V, F, np.concatenate(sj), np.concatenate(sw), np.concatenate(vpart),
                    np.clip(np.concatenate(vuv), 0.0, 1.0), part, cfg.edge_bound,
                    np.concatenate(vseg), np.concatenate(vax), tuple(s.name for s in segs))
    _orient_outward(mesh, segs)
    if part != cfg.parts:
        raise BodyError(f"internal: built {part} parts, expected {cfg.parts}")
    return skel, mesh


def _orient_outward(mesh: BodyMesh, segs: List[_Segment]) -> None:
    V, F = mesh.vertices, mesh.faces
    c = V[F].mean(axis=1)
    n = np.cross(V[F[:, 1]] - V[F[:, 0]], V[F[:, 2]] - V[F[:, 0]])
    seg = mesh.vertex_segment[F[:, 0]]
    a = np.stack([segs[s].a for s in seg])
    b = np.stack([segs[s].b for s in seg])
    d = b - a
    t = np.clip(np.einsum("ij,ij->i", c - a, d) / np.einsum("ij,ij->i", d, d), 0.0, 1.0)
    outward = c - (a + t[:, None] * d)
    flip = np.einsum("ij,ij->i", n, outward) < 0
    mesh.faces = np.where(flip[:, None], F[:, [0, 2, 1]], F).astype(np.int32)


# --- kinematics ---------------------------------------------------------------

def world_transforms(skel: Skeleton, pose: BodyPose) -> Tuple[np.ndarray, np.ndarray]:
    """Per-joint world rotations (J,3,3) and positions (J,3)."""
    J = skel.n_joints
    rots = np.empty((J, 3, 3))
    pos = np.empty((J, 3))
    for j in range(J):
        p = skel.parents[j]
        if p < 0:
            rots[j] = pose.root.rotation @ pose.rotations[j]
            pos[j] = pose.root.rotation @ skel.offsets[j] + pose.root.translation
        else:
            rots[j] = rots[p] @ pose.rotations[j]
            pos[j] = pos[p] + rots[p] @ skel.offsets[j]
    return rots, pos


def forward_kinematics(skel: Skeleton, pose: BodyPose) -> np.ndarray:
    return world_transforms(skel, pose)[1]


def skin_mesh(skel: Skeleton, mesh: BodyMesh, pose: BodyPose) -> np.ndarray:
    """Linear blend skinning of the rest mesh into ``pose``."""
    rots, pos = world_transforms(skel, pose)
    rest = skel.rest_positions()
    trans = pos - np.einsum("jab,jb->ja", rots, rest)
    W = mesh.dense_weights(skel.n_joints)
    M = np.einsum("vj,jab->vab", W, rots)
    t = W @ trans
    return np.einsum("vab,vb->va", M, mesh.vertices) + t


def target_positions(skel: Skeleton, pose: BodyPose) -> np.ndarray:
    return forward_kinematics(skel, pose)[TARGET_JOINTS]


def targets_from_pose(skel: Skeleton, pose: BodyPose) -> JointTargets15:
    return JointTargets15(target_positions(skel, pose))


# --- inverse kinematics -------------------------------------------------------

@dataclass
class IKResult:
    pose: BodyPose
    residual: float  # mean per-joint distance (m) over joints with confidence > 0
    iterations: int


def _mean_residual(err: np.ndarray, conf: np.ndarray) -> float:
    d = np.linalg.norm(err, axis=1)
    m = conf > 0
    return float(d[m].mean()) if m.any() else 0.0


def initial_pose_from_targets(skel: Skeleton, targets: JointTargets15) -> BodyPose:
    """Rest pose placed at the hip midpoint and yawed along the hip line.

    The root joint is unobserved by the 15-joint estimator, so it is seeded
    from the hips.
    """
    targets.validate()
    idx = {n: i for i, n in enumerate(TARGET_NAMES)}
    lh, rh = targets.positions[idx["l_hip"]], targets.positions[idx["r_hip"]]
    hip_line = lh - rh
    yaw = math.atan2(-hip_line[2], hip_line[0])
    rot = axis_angle_to_matrix([0.0, yaw, 0.0])
    rest = skel.rest_positions()
    rest_mid = 0.5 * (rest[JOINT_INDEX["l_hip"]] + rest[JOINT_INDEX["r_hip"]])
    trans = 0.5 * (lh + rh) - rot @ rest_mid
    return BodyPose(RigidTransform(rot, trans), np.tile(np.eye(3), (skel.n_joints, 1, 1)))


def solve_ik(skel: Skeleton, targets: JointTargets15, init: Optional[BodyPose] = None,
             iters: int = 200, damping: float = 1e-2, tol: float = 1e-10,
             max_step: float = 0.5, restart_above: Optional[float] = 1e-4) -> IKResult:
    """Damped least squares on confidence-weighted joint position residuals.

    Unknowns are the root translation and a rotation vector increment per
    joint, applied on the right of each local rotation. Steps that do not
    lower the residual are rejected and the damping raised, so the returned
    pose is the best one encountered. If the run stalls above
    ``restart_above`` it is repeated once from the hip-line seed of
    :func:`initial_pose_from_targets` and the better result kept.
    """
    result = _dls(skel, targets, init, iters, damping, tol, max_step, restart_above)
    left = iters - result.iterations
    if restart_above is not None and result.residual > restart_above and left > 0:
        again = _dls(skel, targets, initial_pose_from_targets(skel, targets), left, damping, tol,
                     max_step, None)
        if again.residual < result.residual:
            return IKResult(again.pose, again.residual, result.iterations + again.iterations)
        return IKResult(result.pose, result.residual, result.iterations + again.iterations)
    return result


def _dls(skel, targets, init, iters, damping, tol, max_step, stall_above) -> IKResult:
    targets.validate()
    pose = (init or BodyPose.rest(skel.n_joints)).copy()
    if not pose.is_valid(1e-6):
        raise BodyError("initial pose is not a valid rigid pose")
    J = skel.n_joints
    anc = skel.ancestors()[:, TARGET_JOINTS]  # (J,15)
    conf = targets.confidence
    w = np.repeat(conf, 3)
    n_dof = 3 + 3 * J

    def evaluate(p: BodyPose):
        rots, pos = world_transforms(skel, p)
        return rots, pos, targets.positions - pos[TARGET_JOINTS]

    rots, pos, err = evaluate(pose)
    res = _mean_residual(err, conf)
    lam = damping
    history = []
    it = 0
    for it in range(1, iters + 1):
        if res < tol:
            it -= 1
            break
        history.append(res)
        if (stall_above is not None and len(history) > 15 and res > stall_above
                and res > 0.99 * history[-16]):
            break
        tp = pos[TARGET_JOINTS]  # (15,3)
        jac = np.zeros((15, 3, n_dof))
        jac[:, :, :3] = np.eye(3)
        # world rotation axes of each joint's local DOFs: columns of rots[j]
        lever = tp[None, :, :] - pos[:, None, :]  # (J,15,3)
        for k in range(3):
            ax = rots[:, :, k]  # (J,3)
            col = np.cross(ax[:, None, :], lever) * anc[:, :, None]  # (J,15,3)
            jac[:, :, 3 + k::3] = col.transpose(1, 2, 0)
        Jm = jac.reshape(45, n_dof)
        JtW = Jm.T * w
        JtWJ = JtW @ Jm
        rhs = JtW @ err.reshape(45)
        delta = np.linalg.solve(JtWJ + lam ** 2 * np.eye(n_dof), rhs)
        norm = np.linalg.norm(delta[3:])
        if norm > max_step:
            delta *= max_step / norm
        new = pose.copy()
        new.root = RigidTransform(pose.root.rotation, pose.root.translation + delta[:3])
        inc = delta[3:].reshape(J, 3)
        for j in range(J):
            if np.any(inc[j]):
                new.rotations[j] = orthonormalize(pose.rotations[j] @ axis_angle_to_matrix(inc[j]))
        n_rots, n_pos, n_err = evaluate(new)
        n_res = _mean_residual(n_err, conf)
        if n_res < res:
            pose, rots, pos, err, res = new, n_rots, n_pos, n_err, n_res
            lam = max(damping, lam * 0.5)
        else:
            # rejected step: damp harder, keep the best pose
            lam = min(lam * 4.0, 1e3)
    return IKResult(pose, res, it)


# --- serialization --------------------------------------------------------------

def save_body(path, skel: Skeleton, mesh: BodyMesh, cfg: Optional[BodyConfig] = None) -> None:
    meta = {
        "format": "egorender-body", "version": 1,
        "joint_names": list(skel.names), "parents": skel.parents.tolist(),
        "offsets": skel.offsets.tolist(), "n_parts": mesh.n_parts, "edge_bound": mesh.edge_bound,
        "config": asdict(cfg) if cfg is not None else None,
    }
    write_container(path, meta, {
        "vertices": mesh.vertices.astype("<f4"),
        "faces": mesh.faces.astype("<i4"),
        "skin_joints": mesh.skin_joints.astype("<i4"),
        "skin_weights": mesh.skin_weights.astype("<f4"),
        "vertex_part": mesh.vertex_part.astype("<i4"),
        "vertex_uv": mesh.vertex_uv.astype("<f4"),
    })


def load_body(path) -> Tuple[Skeleton, BodyMesh]:
    """Load a body container.

    When the container echoes its construction config the mesh is rebuilt
    exactly from it; otherwise the float32 blocks are used as stored.
    """
    meta, blocks = read_container(path)
    if meta.get("format") != "egorender-body":
        raise BodyError(f"{path}: not a body container")
    if tuple(meta["joint_names"]) != JOINT_NAMES:
        raise BodyError(f"{path}: joint name list does not match this build")
    if meta.get("config"):
        return build_canonical_body(BodyConfig.from_dict(meta["config"]))
    skel = Skeleton(tuple(meta["joint_names"]), np.array(meta["parents"]), np.array(meta["offsets"]))
    w = blocks["skin_weights"].astype(np.float64)
    w /= w.sum(axis=1, keepdims=True)
    mesh = BodyMesh(blocks["vertices"].astype(np.float64), blocks["faces"].astype(np.int32),
                    blocks["skin_joints"].astype(np.int32), w,
                    blocks["vertex_part"].astype(np.int32), blocks["vertex_uv"].astype(np.float64),
                    int(meta["n_parts"]), float(meta["edge_bound"]))
    return skel, mesh
