"""Texture synthesis: partial explicit textures, implicit stack init, global stack."""
from __future__ import annotations

from typing import Iterable, Sequence, Tuple

import numpy as np

from . import counters
from .atlas import AtlasError, AtlasLayout, TextureStack
from .raster import IUVImage

UNSEEN_VALUE = 0.5


def extract_partial_texture(image: np.ndarray, iuv: IUVImage, layout: AtlasLayout) -> TextureStack:
    """Splat each foreground pixel to the nearest texel of its part chart.

    Competing pixels resolve to the smallest depth (first pixel in raster
    order on ties). Afterwards the chart border ring is filled from its
    inward neighbours wherever those were written, and marked visible.
    """
    counters.calls["extract_partial_texture"] += 1
    image = np.asarray(image)
    if image.shape[:2] != iuv.part.shape or image.ndim != 3 or image.shape[2] != 3:
        raise AtlasError(f"image {image.shape} and IUV {iuv.part.shape} dimensions differ")
    if iuv.part.max(initial=0) > layout.n_parts:
        raise AtlasError(f"IUV uses part {iuv.part.max()} beyond layout's {layout.n_parts}")
    S = layout.chart_size
    tex = TextureStack.zeros(layout, 3, with_visibility=True)
    part = iuv.part.reshape(-1)
    fg = np.flatnonzero(part > 0)
    if len(fg) == 0:
        return tex
    uv = iuv.uv.reshape(-1, 2)[fg]
    tx = np.clip(np.floor(uv[:, 0] * S), 0, S - 1).astype(np.int64)
    ty = np.clip(np.floor(uv[:, 1] * S), 0, S - 1).astype(np.int64)
    texel = ((part[fg].astype(np.int64) - 1) * S + ty) * S + tx
    depth = iuv.depth.reshape(-1)[fg]
    order = np.lexsort((fg, depth, texel))
    first = np.ones(len(order), dtype=bool)
    first[1:] = texel[order][1:] != texel[order][:-1]
    win = order[first]
    flat = tex.data.reshape(-1, 3)
    flat[texel[win]] = image.reshape(-1, 3)[fg[win]].astype(np.float64)
    tex.visibility.reshape(-1)[texel[win]] = True
    _fill_gutter(tex)
    return tex


def _fill_gutter(tex: TextureStack) -> None:
    S = tex.chart_size
    if S < 3:
        return
    ring = np.zeros((S, S), dtype=bool)
    ring[0, :] = ring[-1, :] = ring[:, 0] = ring[:, -1] = True
    rr, cc = np.nonzero(ring)
    ir, ic = np.clip(rr, 1, S - 2), np.clip(cc, 1, S - 2)
    vis = tex.visibility
    src_vis = vis[:, ir, ic]
    need = ~vis[:, rr, cc] & src_vis
    src = tex.data[:, ir, ic]
    cur = tex.data[:, rr, cc]
    tex.data[:, rr, cc] = np.where(need[..., None], src, cur)
    vis[:, rr, cc] |= need


def init_implicit_stack(records: Iterable[Tuple[np.ndarray, IUVImage]], layout: AtlasLayout) -> TextureStack:
    """Per-texel mean of the explicit textures of ``records``; unseen texels are mid-gray."""
    acc = np.zeros((layout.n_parts, layout.chart_size, layout.chart_size, 3), dtype=np.float64)
    cnt = np.zeros(acc.shape[:3], dtype=np.int64)
    n = 0
    for image, iuv in records:
        t = extract_partial_texture(image, iuv, layout)
        acc += np.where(t.visibility[..., None], t.data, 0.0)
        cnt += t.visibility
        n += 1
    if n == 0:
        raise AtlasError("cannot initialise the implicit stack from zero records")
    mean = np.where(cnt[..., None] > 0, acc / np.maximum(cnt, 1)[..., None], UNSEEN_VALUE)
    return TextureStack(mean)


def compose_global(t_e: TextureStack, t_m: TextureStack) -> TextureStack:
    if not t_e.same_layout(t_m):
        raise AtlasError(f"layout mismatch: {t_e.data.shape[:3]} vs {t_m.data.shape[:3]}")
    return TextureStack(np.concatenate([t_e.data, t_m.data], axis=3))


def texture_preview(tex: TextureStack) -> np.ndarray:
    """8-bit preview grid; stacks with more than 3 channels show one row band per 3 channels."""
    atlas = tex.atlas_image()
    C = atlas.shape[2]
    bands = []
    for c0 in range(0, C, 3):
        band = atlas[..., c0:c0 + 3]
        if band.shape[2] < 3:
            band = np.concatenate([band, np.repeat(band[..., :1], 3 - band.shape[2], axis=2)], axis=2)
        lo, hi = band.min(), band.max()
        if lo < 0.0 or hi > 1.0:
            band = (band - lo) / max(hi - lo, 1e-12)
        bands.append(band)
    return np.rint(np.clip(np.concatenate(bands, axis=0), 0, 1) * 255).astype(np.uint8)
