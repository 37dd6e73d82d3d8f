"""Compact networks: dense-pose FCN, image generator, multiscale discriminator,
per-frame texture feature extractor, and perceptual feature extractors."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .container import read_container, write_container
from .raster import IUVImage

CHECKPOINT_FORMAT = "egorender-checkpoint"
CHECKPOINT_VERSION = 1


class NetError(ValueError):
    pass


def _norm(kind: str, ch: int) -> nn.Module:
    if kind == "instance":
        return nn.InstanceNorm2d(ch, affine=True)
    if kind == "none":
        return nn.Identity()
    raise NetError(f"unknown norm {kind!r}")


def conv_block(cin: int, cout: int, stride: int = 1, norm: str = "instance") -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), _norm(norm, cout), nn.ReLU(inplace=True))


class UNet(nn.Module):
    """Encoder-decoder with additive skips.

    Level 0 runs at full resolution with ``base`` channels; each further level
    halves the resolution (strided conv) and doubles the width. The decoder
    reduces width with a 1x1 conv before upsampling, adds the skip, and
    refines with a 3x3 conv.
    """

    def __init__(self, in_ch: int, out_ch: int, base: int, levels: int = 4, norm: str = "instance"):
        super().__init__()
        widths = [base * 2 ** i for i in range(levels)]
        self.in_ch, self.levels = in_ch, levels
        self.stem = conv_block(in_ch, widths[0], norm=norm)
        self.down = nn.ModuleList(
            nn.Sequential(conv_block(widths[i - 1], widths[i], 2, norm), conv_block(widths[i], widths[i], 1, norm))
            for i in range(1, levels))
        self.reduce = nn.ModuleList(nn.Conv2d(widths[i], widths[i - 1], 1) for i in range(1, levels))
        self.refine = nn.ModuleList(conv_block(widths[i - 1], widths[i - 1], 1, norm) for i in range(1, levels))
        self.head = nn.Conv2d(widths[0], out_ch, 1)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_ch:
            raise NetError(f"expected {self.in_ch} input channels, got {x.shape[1]}")
        skips = [self.stem(x)]
        for d in self.down:
            skips.append(d(skips[-1]))
        y = skips.pop()
        for i in reversed(range(self.levels - 1)):
            skip = skips.pop()
            y = F.interpolate(self.reduce[i](y), size=skip.shape[-2:], mode="bilinear", align_corners=False)
            y = self.refine[i](y + skip)
        return y

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


def count_parameters(module: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


# --- dense pose -------------------------------------------------------------------

class EgoDPNet(nn.Module):
    """Fixed-size dense FCN predicting part logits (P+1) and per-part UV (2P)."""

    def __init__(self, n_parts: int = 10, base: int = 32, levels: int = 4, input_size=(128, 128)):
        super().__init__()
        self.n_parts = n_parts
        self.input_size = tuple(int(s) for s in input_size)
        self.arch = {"kind": "egodpnet", "n_parts": n_parts, "base": base, "levels": levels,
                     "input_size": list(self.input_size)}
        self.body = UNet(3, n_parts + 1 + 2 * n_parts, base, levels)

    def forward(self, image: torch.Tensor):
        """(B,3,H,W) in [0,1] -> (logits (B,P+1,H,W), uv (B,P,2,H,W) in [0,1])."""
        out = self.body(image * 2.0 - 1.0)
        P = self.n_parts
        logits = out[:, :P + 1]
        uv = torch.sigmoid(out[:, P + 1:]).reshape(out.shape[0], P, 2, *out.shape[-2:])
        return logits, uv


def egodp_predict(net: EgoDPNet, image: np.ndarray) -> IUVImage:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise NetError(f"expected an (H,W,3) image, got {image.shape}")
    if tuple(image.shape[:2]) != net.input_size:
        raise NetError(f"Ego-DPNet input must be {net.input_size}, got {image.shape[:2]}")
    if image.dtype == np.uint8:
        image = image.astype(np.float32) / 255.0
    x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    was_training = net.training
    net.eval()
    with torch.no_grad():
        logits, uv = net(x)
    net.train(was_training)
    return iuv_from_heads(logits[0], uv[0])


def iuv_from_heads(logits: torch.Tensor, uv: torch.Tensor) -> IUVImage:
    """logits (P+1,H,W), uv (P,2,H,W) -> IUVImage with dummy foreground depth 1."""
    part = logits.argmax(0)
    idx = (part - 1).clamp(min=0)
    sel = torch.gather(uv, 0, idx[None, None].expand(1, 2, *idx.shape))[0]  # (2,H,W)
    part_np = part.numpy().astype(np.int32)
    fg = part_np > 0
    uv_np = np.where(fg[..., None], sel.permute(1, 2, 0).double().numpy(), 0.0)
    return IUVImage(part_np, uv_np, np.where(fg, 1.0, np.inf))


def iuv_to_targets(iuvs: Sequence[IUVImage]):
    """Stack IUV images into (part (B,H,W) long, uv (B,2,H,W) float) training targets."""
    part = torch.from_numpy(np.stack([i.part for i in iuvs]).astype(np.int64))
    uv = torch.from_numpy(np.stack([i.uv for i in iuvs]).astype(np.float32)).permute(0, 3, 1, 2)
    return part, uv


UV_LOSS_WEIGHT = 10.0
UV_SMOOTH_BETA = 0.5


def egodp_loss(logits: torch.Tensor, uv: torch.Tensor, gt_part: torch.Tensor, gt_uv: torch.Tensor,
               uv_weight: float = UV_LOSS_WEIGHT) -> torch.Tensor:
    """Cross-entropy over all pixels plus weighted smooth-L1 on UV of the GT part at GT foreground."""
    if logits.shape[-2:] != gt_part.shape[-2:] or gt_uv.shape[-2:] != gt_part.shape[-2:]:
        raise NetError(f"prediction {tuple(logits.shape)} and target {tuple(gt_part.shape)} differ")
    ce = F.cross_entropy(logits, gt_part)
    fg = gt_part > 0
    if not fg.any():
        return ce
    idx = (gt_part - 1).clamp(min=0)
    B, P, _, H, W = uv.shape
    sel = torch.gather(uv, 1, idx[:, None, None].expand(B, 1, 2, H, W))[:, 0]  # (B,2,H,W)
    m = fg[:, None].expand_as(sel)
    reg = F.smooth_l1_loss(sel[m], gt_uv[m], beta=UV_SMOOTH_BETA)
    return ce + uv_weight * reg


# --- generator and discriminator ----------------------------------------------------

class RenderNet(nn.Module):
    """Feature image (B,C,H,W) -> RGB in [0,1]."""

    def __init__(self, in_ch: int = 6, base: int = 64, levels: int = 4):
        super().__init__()
        self.in_ch = in_ch
        self.arch = {"kind": "rendernet", "in_ch": in_ch, "base": base, "levels": levels}
        self.body = UNet(in_ch, 3, base, levels)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        if feat.shape[1] != self.in_ch:
            raise NetError(f"RenderNet expects {self.in_ch} channels, got {feat.shape[1]}")
        return (torch.tanh(self.body(feat)) + 1.0) * 0.5


def rendernet_forward(net: RenderNet, feat: np.ndarray) -> np.ndarray:
    """Inference on one (H,W,C) feature image -> (H,W,3)."""
    x = torch.from_numpy(np.ascontiguousarray(feat, dtype=np.float32)).permute(2, 0, 1)[None]
    was_training = net.training
    net.eval()
    with torch.no_grad():
        y = net(x)
    net.train(was_training)
    return y[0].permute(1, 2, 0).numpy()


class PatchDiscriminator(nn.Module):
    """Four strided/unstrided 4x4 conv layers and a 1-channel logit map (patch stride 8)."""

    def __init__(self, in_ch: int, ndf: int = 64, n_layers: int = 3):
        super().__init__()
        layers = [nn.Conv2d(in_ch, ndf, 4, 2, 2), nn.LeakyReLU(0.2, True)]
        ch = ndf
        for i in range(1, n_layers):
            layers += [nn.Conv2d(ch, ch * 2, 4, 2, 2), nn.InstanceNorm2d(ch * 2, affine=True),
                       nn.LeakyReLU(0.2, True)]
            ch *= 2
        layers += [nn.Conv2d(ch, ch * 2, 4, 1, 2), nn.InstanceNorm2d(ch * 2, affine=True),
                   nn.LeakyReLU(0.2, True), nn.Conv2d(ch * 2, 1, 4, 1, 2)]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


class MultiScaleDiscriminator(nn.Module):
    def __init__(self, feat_ch: int, img_ch: int = 3, n_scales: int = 3, ndf: int = 64):
        super().__init__()
        self.feat_ch, self.img_ch = feat_ch, img_ch
        self.arch = {"kind": "discriminator", "feat_ch": feat_ch, "img_ch": img_ch,
                     "n_scales": n_scales, "ndf": ndf}
        self.scales = nn.ModuleList(PatchDiscriminator(feat_ch + img_ch, ndf) for _ in range(n_scales))
        self.downsample = nn.AvgPool2d(3, stride=2, padding=1, count_include_pad=False)

    def forward(self, feat: torch.Tensor, image: torch.Tensor) -> List[torch.Tensor]:
        if feat.shape[0] != image.shape[0] or feat.shape[-2:] != image.shape[-2:]:
            raise NetError(f"feature {tuple(feat.shape)} and image {tuple(image.shape)} shapes differ")
        if feat.shape[1] != self.feat_ch or image.shape[1] != self.img_ch:
            raise NetError("discriminator channel mismatch")
        x = torch.cat([feat, image], 1)
        outs = []
        for k, d in enumerate(self.scales):
            if k:
                x = self.downsample(x)
            outs.append(d(x))
        return outs


def discriminator_forward(D: MultiScaleDiscriminator, feat: torch.Tensor, image: torch.Tensor):
    return D(feat, image)


# --- Fea-Net baseline ---------------------------------------------------------------

class FrameFeatureNet(nn.Module):
    """Texture-space encoder-decoder: partial RGB charts (P,S,S,3) -> 16-channel stack."""

    def __init__(self, out_ch: int = 16, base: int = 32, levels: int = 3):
        super().__init__()
        self.out_ch = out_ch
        self.arch = {"kind": "frame_feature_net", "out_ch": out_ch, "base": base, "levels": levels}
        self.body = UNet(3, out_ch, base, levels)

    def forward(self, charts: torch.Tensor) -> torch.Tensor:
        """charts (P,S,S,3) -> flat texels (P*S*S, out_ch)."""
        x = charts.permute(0, 3, 1, 2) * 2.0 - 1.0
        y = self.body(x)
        return y.permute(0, 2, 3, 1).reshape(-1, self.out_ch)


# --- perceptual extractors -----------------------------------------------------------

class RandomFeaturePyramid(nn.Module):
    """Frozen, seed-deterministic random conv pyramid; activations of every layer."""

    def __init__(self, widths: Sequence[int] = (16, 32, 64, 64, 64), seed: int = 1234):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.layers = nn.ModuleList()
        cin = 3
        for i, w in enumerate(widths):
            conv = nn.Conv2d(cin, w, 3, 1 if i == 0 else 2, 1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * math.sqrt(2.0 / (cin * 9)))
                conv.bias.zero_()
            self.layers.append(conv)
            cin = w
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        feats = []
        h = x * 2.0 - 1.0
        for conv in self.layers:
            h = F.relu(conv(h))
            feats.append(h)
        return feats


class IdentityExtractor(nn.Module):
    """One 'layer' equal to the input image; reduces the perceptual loss to L1."""

    def forward(self, x):
        return [x]


class PixelEmbedder(nn.Module):
    """Face embedder stand-in returning the raw crop pixels."""

    def forward(self, crop):
        return crop.reshape(crop.shape[0], -1)


# --- checkpoints ---------------------------------------------------------------------

def build_network(arch: dict) -> nn.Module:
    kind = arch.get("kind")
    a = {k: v for k, v in arch.items() if k != "kind"}
    if kind == "egodpnet":
        return EgoDPNet(**a)
    if kind == "rendernet":
        return RenderNet(**a)
    if kind == "discriminator":
        return MultiScaleDiscriminator(**a)
    if kind == "frame_feature_net":
        return FrameFeatureNet(**a)
    raise NetError(f"unknown network kind {kind!r}")


@dataclass
class Checkpoint:
    meta: dict
    modules: Dict[str, Dict[str, torch.Tensor]]
    optimizers: Dict[str, dict]
    tensors: Dict[str, torch.Tensor]

    @property
    def step(self) -> int:
        return int(self.meta["step"])

    @property
    def arch(self) -> dict:
        return self.meta["arch"]

    def build(self, name: str) -> nn.Module:
        net = build_network(self.meta["arch"][name])
        net.load_state_dict(self.modules[name])
        return net


def _optim_blocks(name: str, state: dict, blocks: dict) -> dict:
    entries = {}
    for pid, st in state["state"].items():
        ent = {}
        for k, v in st.items():
            if torch.is_tensor(v):
                key = f"optim/{name}/{pid}/{k}"
                blocks[key] = v.detach().cpu().numpy().astype("<f4")
                ent[k] = {"block": key}
            else:
                ent[k] = v
        entries[str(pid)] = ent
    return {"state": entries, "param_groups": state["param_groups"]}


def save_checkpoint(path, step: int, modules: Dict[str, nn.Module],
                    optimizers: Optional[Dict[str, torch.optim.Optimizer]] = None,
                    tensors: Optional[Dict[str, torch.Tensor]] = None, extra: Optional[dict] = None) -> None:
    blocks: Dict[str, np.ndarray] = {}
    arch = {}
    for name, m in modules.items():
        arch[name] = getattr(m, "arch", None)
        for k, v in m.state_dict().items():
            blocks[f"model/{name}/{k}"] = v.detach().cpu().numpy().astype("<f4")
    optim_meta = {}
    for name, opt in (optimizers or {}).items():
        optim_meta[name] = _optim_blocks(name, opt.state_dict(), blocks)
    for name, t in (tensors or {}).items():
        blocks[f"tensor/{name}"] = t.detach().cpu().numpy().astype("<f4")
    meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "step": int(step),
            "arch": arch, "optimizers": optim_meta, "extra": extra or {}}
    write_container(path, meta, blocks)


def load_checkpoint(path) -> Checkpoint:
    meta, blocks = read_container(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise NetError(f"{path}: not a checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise NetError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    modules: Dict[str, Dict[str, torch.Tensor]] = {}
    tensors = {}
    for key, arr in blocks.items():
        kind, _, rest = key.partition("/")
        if kind == "model":
            name, _, pname = rest.partition("/")
            modules.setdefault(name, {})[pname] = torch.from_numpy(arr.astype(np.float32))
        elif kind == "tensor":
            tensors[rest] = torch.from_numpy(arr.astype(np.float32))
    optimizers = {}
    for name, om in meta.get("optimizers", {}).items():
        state = {}
        for pid, ent in om["state"].items():
            state[int(pid)] = {k: torch.from_numpy(blocks[v["block"]].astype(np.float32))
                               if isinstance(v, dict) and "block" in v else v for k, v in ent.items()}
        optimizers[name] = {"state": state, "param_groups": om["param_groups"]}
    return Checkpoint(meta, modules, optimizers, tensors)
