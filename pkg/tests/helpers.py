"""Shared scene builders for tests."""
import filecmp

import numpy as np

from egorender.atlas import AtlasLayout, TextureStack
from egorender.geometry import PinholeCamera, RigidTransform, axis_angle_to_matrix
from egorender.raster import feature_render, rasterize
from egorender.textures import extract_partial_texture


def flat_chart_iuv(size: int, part: int = 1, tilt_deg: float = 0.0):
    """A unit quad carrying one chart, filling a ``size``-pixel pinhole image.

    Untilted, pixel (i, j) lands exactly on texel centre ((i+0.5)/size, (j+0.5)/size).
    """
    v = np.array([[-0.5, -0.5, 0.0], [0.5, -0.5, 0.0], [0.5, 0.5, 0.0], [-0.5, 0.5, 0.0]])
    uv = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    faces = np.array([[0, 2, 1], [0, 3, 2]])
    R = axis_angle_to_matrix([np.radians(tilt_deg), 0.0, 0.0])
    cam = PinholeCamera((float(size), float(size)), ((size - 1) / 2, (size - 1) / 2), (size, size),
                        RigidTransform(R, np.array([0.0, 0.0, 1.0])))
    return rasterize(v, faces, uv, np.full(2, part), cam)


def texture_round_trip(chart: np.ndarray, image_size: int, tilt_deg: float = 0.0):
    """Render a one-part chart on the flat quad and extract it back; returns (extracted stack, error)."""
    S = chart.shape[0]
    tex = TextureStack(chart[None].astype(np.float64))
    iuv = flat_chart_iuv(image_size, 1, tilt_deg)
    img = feature_render(tex, iuv)
    ext = extract_partial_texture(img, iuv, AtlasLayout(1, S))
    vis = ext.visibility[0]
    err = np.abs(ext.data[0][vis] - chart[vis]).mean()
    return ext, float(err), vis


def tree_equal(a, b) -> bool:
    """True when two directory trees hold the same names with byte-identical files."""
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    if mismatch or errors:
        return False
    return all(tree_equal(a / d, b / d) for d in cmp.common_dirs)
