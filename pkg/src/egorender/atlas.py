"""Texture stack storage: P charts of S x S texels with C channels."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .container import read_container, write_container


class AtlasError(ValueError):
    pass


@dataclass(frozen=True)
class AtlasLayout:
    n_parts: int
    chart_size: int = 64
    columns: int = 6

    @property
    def rows(self) -> int:
        return math.ceil(self.n_parts / self.columns)

    def chart_origin(self, part: int):
        """Top-left texel of 1-based ``part`` in the preview grid."""
        k = part - 1
        return (k // self.columns) * self.chart_size, (k % self.columns) * self.chart_size

    def to_dict(self) -> dict:
        return {"P": self.n_parts, "S": self.chart_size, "grid": [self.columns, self.rows]}


@dataclass
class TextureStack:
    data: np.ndarray                       # (P,S,S,C)
    visibility: Optional[np.ndarray] = None  # (P,S,S) bool, explicit stacks only

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[1] != self.data.shape[2]:
            raise AtlasError(f"texture data must be (P,S,S,C), got {self.data.shape}")
        if self.visibility is not None and self.visibility.shape != self.data.shape[:3]:
            raise AtlasError("visibility mask shape does not match charts")

    @property
    def n_parts(self) -> int:
        return self.data.shape[0]

    @property
    def chart_size(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    @property
    def layout(self) -> AtlasLayout:
        return AtlasLayout(self.n_parts, self.chart_size)

    @classmethod
    def zeros(cls, layout: AtlasLayout, channels: int, with_visibility: bool = False,
              dtype=np.float64) -> "TextureStack":
        S = layout.chart_size
        data = np.zeros((layout.n_parts, S, S, channels), dtype=dtype)
        vis = np.zeros((layout.n_parts, S, S), dtype=bool) if with_visibility else None
        return cls(data, vis)

    def same_layout(self, other: "TextureStack") -> bool:
        return self.data.shape[:3] == other.data.shape[:3]

    def atlas_image(self) -> np.ndarray:
        """Charts tiled on the preview grid, (rows*S, cols*S, C)."""
        lay = self.layout
        S = lay.chart_size
        out = np.zeros((lay.rows * S, lay.columns * S, self.channels), dtype=self.data.dtype)
        for p in range(1, self.n_parts + 1):
            r, c = lay.chart_origin(p)
            out[r:r + S, c:c + S] = self.data[p - 1]
        return out

    def checksum(self) -> str:
        import hashlib
        return hashlib.sha256(np.ascontiguousarray(self.data).tobytes()).hexdigest()


def save_texture(path, tex: TextureStack) -> None:
    meta = {"format": "egorender-texture", "version": 1, **tex.layout.to_dict(), "C": tex.channels}
    blocks = {"texels": tex.data.astype("<f4")}
    if tex.visibility is not None:
        blocks["visibility"] = np.packbits(tex.visibility.reshape(-1))
        meta["visibility_bits"] = int(tex.visibility.size)
    write_container(path, meta, blocks)


def load_texture(path) -> TextureStack:
    meta, blocks = read_container(path)
    if meta.get("format") != "egorender-texture":
        raise AtlasError(f"{path}: not a texture container")
    P, S, C = meta["P"], meta["S"], meta["C"]
    data = blocks["texels"].astype(np.float64).reshape(P, S, S, C)
    vis = None
    if "visibility" in blocks:
        vis = np.unpackbits(blocks["visibility"])[: meta["visibility_bits"]].astype(bool).reshape(P, S, S)
    return TextureStack(data, vis)
