"""Z-buffered triangle rasterization into IUV images.

Vertices are projected per camera model and triangles are filled in screen
space. Pixel centres sit on integer coordinates. Pinhole interpolation is
perspective-correct; fisheye interpolation is screen-linear, which is
accurate because mesh edges are kept short.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np

from ..geometry import EPS_Z, Camera, FisheyeCamera, fisheye_project_many, pinhole_project_many

# posed edges may stretch under skinning; guard at 1.6x the 5 cm rest bound
DEFAULT_FISHEYE_MAX_EDGE = 0.10
FISHEYE_NEAR = 0.02


class RasterError(ValueError):
    pass


@dataclass
class IUVImage:
    part: np.ndarray   # (H,W) int32, 0 = background
    uv: np.ndarray     # (H,W,2) float64
    depth: np.ndarray  # (H,W) float64, +inf at background

    @classmethod
    def empty(cls, height: int, width: int) -> "IUVImage":
        return cls(np.zeros((height, width), np.int32), np.zeros((height, width, 2)),
                   np.full((height, width), np.inf))

    @property
    def shape(self):
        return self.part.shape

    @property
    def mask(self) -> np.ndarray:
        return self.part > 0

    def check(self) -> None:
        if not np.array_equal(self.part == 0, np.isinf(self.depth)):
            raise RasterError("IUV invariant violated: background must coincide with infinite depth")
        if not np.all(np.isfinite(self.uv[self.part > 0])):
            raise RasterError("IUV invariant violated: non-finite uv on foreground")


@numba.njit(cache=True)
def _raster_kernel(sx, sy, vdepth, vuv, faces, face_part, keep, H, W,
                   perspective, cx, cy, rmax, part, uv, depth):
    for f in range(faces.shape[0]):
        if not keep[f]:
            continue
        i0 = faces[f, 0]
        i1 = faces[f, 1]
        i2 = faces[f, 2]
        x0 = sx[i0]
        y0 = sy[i0]
        x1 = sx[i1]
        y1 = sy[i1]
        x2 = sx[i2]
        y2 = sy[i2]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < 1e-12:
            continue
        xmin = max(0, int(np.ceil(min(x0, min(x1, x2)))))
        xmax = min(W - 1, int(np.floor(max(x0, max(x1, x2)))))
        ymin = max(0, int(np.ceil(min(y0, min(y1, y2)))))
        ymax = min(H - 1, int(np.floor(max(y0, max(y1, y2)))))
        if xmin > xmax or ymin > ymax:
            continue
        inv_area = 1.0 / area
        d0 = vdepth[i0]
        d1 = vdepth[i1]
        d2 = vdepth[i2]
        for py in range(ymin, ymax + 1):
            fy = float(py)
            for px in range(xmin, xmax + 1):
                fx = float(px)
                b0 = ((x1 - fx) * (y2 - fy) - (x2 - fx) * (y1 - fy)) * inv_area
                b1 = ((x2 - fx) * (y0 - fy) - (x0 - fx) * (y2 - fy)) * inv_area
                b2 = 1.0 - b0 - b1
                if b0 < 0.0 or b1 < 0.0 or b2 < 0.0:
                    continue
                if rmax > 0.0:
                    ddx = fx - cx
                    ddy = fy - cy
                    if ddx * ddx + ddy * ddy > rmax * rmax:
                        continue
                if perspective:
                    c0 = b0 / d0
                    c1 = b1 / d1
                    c2 = b2 / d2
                    iz = c0 + c1 + c2
                    z = 1.0 / iz
                    c0 *= z
                    c1 *= z
                    c2 *= z
                else:
                    z = b0 * d0 + b1 * d1 + b2 * d2
                    c0 = b0
                    c1 = b1
                    c2 = b2
                if z < depth[py, px]:
                    depth[py, px] = z
                    part[py, px] = face_part[f]
                    uv[py, px, 0] = c0 * vuv[i0, 0] + c1 * vuv[i1, 0] + c2 * vuv[i2, 0]
                    uv[py, px, 1] = c0 * vuv[i0, 1] + c1 * vuv[i1, 1] + c2 * vuv[i2, 1]


def rasterize(vertices: np.ndarray, faces: np.ndarray, vertex_uv: np.ndarray, face_part: np.ndarray,
              camera: Camera, max_edge: Optional[float] = DEFAULT_FISHEYE_MAX_EDGE) -> IUVImage:
    """Rasterize a posed triangle mesh (world coordinates) into an IUV image.

    Back faces (tested in 3D against the camera centre) are culled, as are
    triangles behind a pinhole camera or entirely outside the fisheye FOV.
    Overlaps resolve to the nearest surface; exact depth ties keep the
    lower triangle index.
    """
    W, H = camera.image_size
    out = IUVImage.empty(H, W)
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) == 0:
        return out
    vuv = np.ascontiguousarray(vertex_uv, dtype=np.float64)
    face_part = np.ascontiguousarray(face_part, dtype=np.int32)
    pc = camera.pose.apply(vertices)
    a, b, c = pc[faces[:, 0]], pc[faces[:, 1]], pc[faces[:, 2]]
    normal = np.cross(b - a, c - a)
    keep = np.einsum("ij,ij->i", normal, a) < 0.0

    fisheye = isinstance(camera, FisheyeCamera)
    if fisheye:
        if max_edge is not None:
            edges = np.stack([np.linalg.norm(b - a, axis=1), np.linalg.norm(c - b, axis=1),
                              np.linalg.norm(a - c, axis=1)], axis=1)
            bad = np.argwhere(edges > max_edge)
            if len(bad):
                f, e = bad[0]
                i, j = faces[f, e], faces[f, (e + 1) % 3]
                raise RasterError(f"edge ({i}, {j}) of face {f} has length {edges[f, e]:.4f} m, "
                                  f"exceeding the fisheye bound {max_edge} m")
        pix, theta, _ = fisheye_project_many(pc, camera, clip_fov=False)
        vdepth = np.linalg.norm(pc, axis=1)
        th = theta[faces]
        keep &= (th.min(axis=1) <= camera.fov_max) & (th.max(axis=1) < 0.95 * np.pi)
        keep &= vdepth[faces].min(axis=1) > FISHEYE_NEAR
        rmax = camera.fov_radius
        cx, cy = camera.principal_point
    else:
        pix, vdepth, valid = pinhole_project_many(pc, camera)
        keep &= valid[faces].all(axis=1)
        rmax, cx, cy = -1.0, 0.0, 0.0
    _raster_kernel(np.ascontiguousarray(pix[:, 0]), np.ascontiguousarray(pix[:, 1]), vdepth, vuv,
                   faces, face_part, keep, H, W, not fisheye, float(cx), float(cy), float(rmax),
                   out.part, out.uv, out.depth)
    return out


def rasterize_body(skel, mesh, pose, camera: Camera, max_edge: Optional[float] = DEFAULT_FISHEYE_MAX_EDGE
                   ) -> IUVImage:
    from ..body import skin_mesh
    verts = skin_mesh(skel, mesh, pose)
    return rasterize(verts, mesh.faces, mesh.vertex_uv, mesh.face_part, camera, max_edge)
