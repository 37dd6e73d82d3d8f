"""16-bit IUV image files: ch0 = part, ch1/ch2 = round(u|v * 65535)."""
from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

from .rasterize import IUVImage, RasterError

UV_SCALE = 65535.0


def encode_iuv(iuv: IUVImage) -> np.ndarray:
    out = np.zeros(iuv.part.shape + (3,), dtype=np.uint16)
    out[..., 0] = iuv.part
    fg = iuv.part > 0
    q = np.rint(np.clip(iuv.uv, 0.0, 1.0) * UV_SCALE).astype(np.uint16)
    out[..., 1] = np.where(fg, q[..., 0], 0)
    out[..., 2] = np.where(fg, q[..., 1], 0)
    return out


def decode_iuv(arr: np.ndarray) -> IUVImage:
    """Inverse of :func:`encode_iuv`; foreground depth is a dummy 1.0."""
    arr = np.asarray(arr)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise RasterError(f"IUV array must be (H,W,3), got {arr.shape}")
    part = arr[..., 0].astype(np.int32)
    uv = arr[..., 1:].astype(np.float64) / UV_SCALE
    uv[part == 0] = 0.0
    depth = np.where(part > 0, 1.0, np.inf)
    return IUVImage(part, uv, depth)


def save_iuv(path, iuv: IUVImage) -> None:
    enc = encode_iuv(iuv)
    # cv2 stores channels in BGR order
    if not cv2.imwrite(str(path), enc[..., ::-1]):
        raise RasterError(f"could not write {path}")


def read_iuv_array(path) -> np.ndarray:
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise FileNotFoundError(path)
    if arr.dtype != np.uint16 or arr.ndim != 3:
        raise RasterError(f"{path}: not a 16-bit 3-channel IUV image")
    return np.ascontiguousarray(arr[..., ::-1])


def load_iuv(path) -> IUVImage:
    return decode_iuv(read_iuv_array(path))


def iuv_preview(iuv: IUVImage) -> np.ndarray:
    """8-bit false-colour view: hue from the part index, brightness modulated by u and v."""
    part = iuv.part
    k = part.astype(np.float64)
    base = np.stack([(0.1 * k) % 1.0, (0.37 * k) % 1.0, (0.71 * k) % 1.0], axis=-1)
    shade = 0.6 + 0.4 * iuv.uv.mean(axis=-1, keepdims=True)
    img = np.where((part > 0)[..., None], 0.25 + 0.75 * base * shade, 0.0)
    return np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8)
