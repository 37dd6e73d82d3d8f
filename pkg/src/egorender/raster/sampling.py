"""Feature rendering: bilinear sampling of a texture stack at IUV coordinates.

A :class:`SamplingPlan` precomputes, for every foreground pixel, the four
texels it reads and their bilinear weights. Sampling is a gather and its
exact transpose is a scatter-add, which is what texture gradients use.

Chart coordinates: u runs along texel columns and v along rows, with texel
centres at ``(i + 0.5) / S``. Sample positions are clamped to the span of
texel centres so no chart reads outside itself.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .. import counters
from ..atlas import TextureStack
from .rasterize import IUVImage, RasterError


@dataclass
class SamplingPlan:
    height: int
    width: int
    n_parts: int
    chart_size: int
    pixels: torch.Tensor   # (N,) flat pixel index of foreground pixels
    texels: torch.Tensor   # (N,4) flat texel index into (P*S*S)
    weights: torch.Tensor  # (N,4) float64 bilinear weights

    @property
    def n_texels(self) -> int:
        return self.n_parts * self.chart_size * self.chart_size

    @classmethod
    def from_iuv(cls, iuv: IUVImage, n_parts: int, chart_size: int) -> "SamplingPlan":
        part = np.asarray(iuv.part)
        H, W = part.shape
        if part.max(initial=0) > n_parts:
            raise RasterError(f"pose image has part {part.max()} but texture has {n_parts} parts")
        fg = np.flatnonzero(part.reshape(-1) > 0)
        p = part.reshape(-1)[fg].astype(np.int64) - 1
        uv = np.asarray(iuv.uv, dtype=np.float64).reshape(-1, 2)[fg]
        S = chart_size
        x = np.clip(uv[:, 0] * S - 0.5, 0.0, S - 1.0)
        y = np.clip(uv[:, 1] * S - 0.5, 0.0, S - 1.0)
        x0 = np.minimum(np.floor(x), max(S - 2, 0)).astype(np.int64)
        y0 = np.minimum(np.floor(y), max(S - 2, 0)).astype(np.int64)
        fx = x - x0
        fy = y - y0
        x1 = np.minimum(x0 + 1, S - 1)
        y1 = np.minimum(y0 + 1, S - 1)
        base = p * S * S
        tex = np.stack([base + y0 * S + x0, base + y0 * S + x1,
                        base + y1 * S + x0, base + y1 * S + x1], axis=1)
        w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
        return cls(H, W, n_parts, S, torch.from_numpy(fg), torch.from_numpy(tex), torch.from_numpy(w))

    def sample(self, texels: torch.Tensor) -> torch.Tensor:
        """texels (P*S*S, C) -> feature image (H*W, C); background rows are zero."""
        C = texels.shape[1]
        w = self.weights.to(texels.dtype)
        vals = (texels[self.texels] * w[..., None]).sum(dim=1)
        out = texels.new_zeros((self.height * self.width, C))
        out[self.pixels] = vals
        return out

    def scatter(self, upstream: torch.Tensor) -> torch.Tensor:
        """Transpose of :meth:`sample`: (H*W, C) -> (P*S*S, C)."""
        C = upstream.shape[1]
        w = self.weights.to(upstream.dtype)
        contrib = upstream[self.pixels][:, None, :] * w[..., None]  # (N,4,C)
        out = upstream.new_zeros((self.n_texels, C))
        out.index_add_(0, self.texels.reshape(-1), contrib.reshape(-1, C))
        return out


class _FeatureRender(torch.autograd.Function):
    @staticmethod
    def forward(ctx, texels, plan):
        ctx.plan = plan
        return plan.sample(texels)

    @staticmethod
    def backward(ctx, grad_out):
        return ctx.plan.scatter(grad_out.contiguous()), None


def render_features(texels: torch.Tensor, plan: SamplingPlan) -> torch.Tensor:
    """Differentiable sampling of flat texels (P*S*S, C) into an (H, W, C) image."""
    counters.calls["feature_render"] += 1
    return _FeatureRender.apply(texels, plan).reshape(plan.height, plan.width, -1)


def render_features_batch(texels: torch.Tensor, plans: Sequence[SamplingPlan],
                          shared: bool) -> torch.Tensor:
    """Feature images (B, C, H, W) for a batch.

    ``texels`` is (P*S*S, C) when ``shared`` (one stack for all samples,
    e.g. the implicit stack) and (B, P*S*S, C) otherwise.
    """
    outs = []
    for b, plan in enumerate(plans):
        t = texels if shared else texels[b]
        outs.append(render_features(t, plan).permute(2, 0, 1))
    return torch.stack(outs)


def _check(tex: TextureStack, pose_img: IUVImage) -> None:
    if pose_img.part.max(initial=0) > tex.n_parts:
        raise RasterError(f"pose image uses part {pose_img.part.max()} but texture stack has "
                          f"{tex.n_parts} parts")


def feature_render(tex: TextureStack, pose_img: IUVImage) -> np.ndarray:
    """Sample ``tex`` at every foreground pixel of ``pose_img``; (H, W, C), zeros elsewhere."""
    _check(tex, pose_img)
    plan = SamplingPlan.from_iuv(pose_img, tex.n_parts, tex.chart_size)
    flat = torch.from_numpy(np.ascontiguousarray(tex.data).reshape(-1, tex.channels))
    with torch.no_grad():
        return render_features(flat, plan).numpy()


def feature_render_grad(tex: TextureStack, pose_img: IUVImage, upstream: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of :func:`feature_render` w.r.t. the texel values."""
    _check(tex, pose_img)
    H, W = pose_img.shape
    upstream = np.asarray(upstream)
    if upstream.shape != (H, W, tex.channels):
        raise RasterError(f"upstream shape {upstream.shape} != {(H, W, tex.channels)}")
    plan = SamplingPlan.from_iuv(pose_img, tex.n_parts, tex.chart_size)
    g = plan.scatter(torch.from_numpy(np.ascontiguousarray(upstream, dtype=tex.data.dtype)
                                      ).reshape(-1, tex.channels))
    return g.numpy().reshape(tex.data.shape)
