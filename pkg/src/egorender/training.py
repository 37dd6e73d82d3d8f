"""Two-stage training: the dense-pose FCN, then the person-specific generator with
its implicit texture stack, for every ablation variant."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .atlas import AtlasLayout, TextureStack
from .body import JOINT_INDEX, forward_kinematics
from .geometry import project_world
from .nets import (EgoDPNet, FrameFeatureNet, MultiScaleDiscriminator, RandomFeaturePyramid, RenderNet,
                   egodp_loss, egodp_predict, iuv_to_targets, load_checkpoint, save_checkpoint)
from .raster import IUVImage, SamplingPlan, decode_iuv, render_features
from .synthgen import Dataset, to_uint8, save_rgb
from .textures import extract_partial_texture, init_implicit_stack

log = logging.getLogger(__name__)


class TrainError(ValueError):
    pass


@dataclass(frozen=True)
class VariantSpec:
    uses_te: bool
    uses_tm: bool
    tm_trainable: bool
    generator_input: str  # "feature_image" | "pose_encoding"
    per_frame_extractor: bool


VARIANTS: Dict[str, VariantSpec] = {
    "im_tex": VariantSpec(True, True, True, "feature_image", False),
    "ex_tex": VariantSpec(True, True, False, "feature_image", False),
    "only_ego": VariantSpec(True, False, False, "feature_image", False),
    "only_mv": VariantSpec(False, True, True, "feature_image", False),
    "pix2pixhd": VariantSpec(False, False, False, "pose_encoding", False),
    "fea_net": VariantSpec(True, False, False, "feature_image", True),
}

FEA_NET_CHANNELS = 16


def generator_channels(variant: str, n_parts: int) -> int:
    v = VARIANTS[variant]
    if v.generator_input == "pose_encoding":
        return n_parts + 3
    if v.per_frame_extractor:
        return FEA_NET_CHANNELS
    return 3 * (int(v.uses_te) + int(v.uses_tm))


@dataclass
class TrainConfig:
    stage: str = "render"
    variant: str = "im_tex"
    lr_g: float = 2e-4
    lr_tm: float = 2e-3
    lr_d: Optional[float] = None   # defaults to lr_g
    lr_dp: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_gan: float = 1.0
    lambda_p: float = 10.0
    lambda_face: float = 5.0
    face_loss: bool = False
    face_radius: float = 0.1       # fraction of image height
    steps: int = 1000
    batch: int = 4
    seed: int = 0
    frame_limit: int = 0           # 0 = every training frame
    views: List[int] = field(default_factory=lambda: [0])
    ego_pose: str = "predicted"    # "predicted" | "ground_truth"
    precompute: bool = True
    perceptual_seed: int = 1234
    log_every: int = 1
    val_every: int = 0
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.stage not in ("dpnet", "render"):
            raise TrainError(f"stage must be dpnet or render, got {self.stage!r}")
        if self.variant not in VARIANTS:
            raise TrainError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        for k in ("lambda_gan", "lambda_p", "lambda_face", "lr_g", "lr_tm", "lr_dp"):
            if getattr(self, k) < 0:
                raise TrainError(f"{k} must be >= 0")
        if self.steps < 0 or self.batch <= 0:
            raise TrainError("steps must be >= 0 and batch > 0")
        if self.ego_pose not in ("predicted", "ground_truth"):
            raise TrainError(f"ego_pose must be predicted or ground_truth, got {self.ego_pose!r}")
        if not self.views:
            raise TrainError("at least one training view is required")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise TrainError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def d_lr(self) -> float:
        return self.lr_g if self.lr_d is None else self.lr_d


def batch_indices(n: int, batch: int, seed: int, step: int) -> np.ndarray:
    """Items of ``step``: consecutive slices of per-epoch seeded permutations (stateless, resumable)."""
    if n <= 0:
        raise TrainError("empty training set")
    out = np.empty(batch, dtype=np.int64)
    cache: Dict[int, np.ndarray] = {}
    for i in range(batch):
        k = step * batch + i
        e = k // n
        if e not in cache:
            cache[e] = np.random.default_rng(np.random.SeedSequence([seed, 7, e])).permutation(n)
        out[i] = cache[e][k % n]
    return out


class CSVLog:
    def __init__(self, path, columns: Sequence[str], append: bool = False):
        self.path = Path(path)
        self.columns = list(columns)
        new = not (append and self.path.exists())
        self._f = open(self.path, "w" if new else "a", newline="")
        self._w = csv.writer(self._f)
        if new:
            self._w.writerow(self.columns)

    def write(self, row: dict) -> None:
        self._w.writerow([row[c] for c in self.columns])
        self._f.flush()

    def close(self) -> None:
        self._f.close()


def set_deterministic(seed: int) -> None:
    torch.manual_seed(seed)
    if os.environ.get("EGORENDER_DETERMINISTIC") == "1":
        torch.use_deterministic_algorithms(True)


# --- losses ----------------------------------------------------------------------------

def perceptual_loss(extractor: nn.Module, gen: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Sum over extractor layers of the mean absolute activation difference."""
    if gen.shape != gt.shape:
        raise TrainError(f"image shapes differ: {tuple(gen.shape)} vs {tuple(gt.shape)}")
    total = gen.new_zeros(())
    for a, b in zip(extractor(gen), extractor(gt)):
        total = total + (a - b).abs().mean()
    return total


def adversarial_step_losses(D: nn.Module, feat: torch.Tensor, real: torch.Tensor, fake: torch.Tensor):
    """Least-squares GAN losses averaged over the discriminator scales.

    Returns ``(L_D, L_adv)``; ``L_D`` only reaches the discriminator and
    ``L_adv`` only the generator side through ``fake``. The conditioning
    features are detached in both.
    """
    feat = feat.detach()
    real_out = D(feat, real)
    fake_out = D(feat, fake.detach())
    L_D = sum(0.5 * (((r - 1.0) ** 2).mean() + (f ** 2).mean()) for r, f in zip(real_out, fake_out))
    gen_out = D(feat, fake)
    L_adv = sum(((g - 1.0) ** 2).mean() for g in gen_out)
    n = len(real_out)
    return L_D / n, L_adv / n


def face_identity_loss(embedder: Optional[nn.Module], gen: torch.Tensor, gt: torch.Tensor,
                       head_pixels: Sequence[Optional[np.ndarray]], radius: float = 0.1,
                       enabled: bool = True) -> torch.Tensor:
    """Mean L1 between embeddings of square crops around the projected head joint."""
    zero = gen.new_zeros(())
    if not enabled or embedder is None:
        return zero
    H, W = gen.shape[-2:]
    half = max(int(round(radius * H)), 1)
    losses = []
    for b, hp in enumerate(head_pixels):
        if hp is None:
            continue
        cx, cy = int(round(hp[0])), int(round(hp[1]))
        x0, x1 = max(cx - half, 0), min(cx + half, W)
        y0, y1 = max(cy - half, 0), min(cy + half, H)
        if x1 - x0 < 2 or y1 - y0 < 2:
            log.warning("face crop around %s is degenerate; skipped", (cx, cy))
            continue
        ea = embedder(gen[b:b + 1, :, y0:y1, x0:x1])
        eb = embedder(gt[b:b + 1, :, y0:y1, x0:x1])
        losses.append((ea - eb).abs().mean())
    return torch.stack(losses).mean() if losses else zero


def total_generator_loss(cfg: TrainConfig, parts: Dict[str, torch.Tensor]) -> torch.Tensor:
    return (cfg.lambda_p * parts["L_p"] + cfg.lambda_face * parts["L_face"]
            + cfg.lambda_gan * parts["L_adv"])


# --- Ego-DPNet stage ---------------------------------------------------------------------

@dataclass
class DPTrainResult:
    net: EgoDPNet
    losses: List[float]
    checkpoint: Optional[Path]


def _load_dp_data(ds: Dataset, ids: Sequence[int]):
    from .synthgen import load_rgb
    imgs, iuvs = [], []
    for i in ids:
        imgs.append(to_uint8(load_rgb(ds.frame_dir(i) / "ego.png")))
        iuvs.append(ds.ego_iuv_array(i))
    return np.stack(imgs), np.stack(iuvs)


def _dp_batch(imgs: np.ndarray, iuvs: np.ndarray, idx: np.ndarray):
    x = torch.from_numpy(imgs[idx]).permute(0, 3, 1, 2).float() / 255.0
    part, uv = iuv_to_targets([decode_iuv(iuvs[i]) for i in idx])
    return x, part, uv


def cosine_lr(base: float, step: int, total: int) -> float:
    """Half-cosine decay from ``base`` at step 0 towards 0 at ``total``; a pure function of the step."""
    if total <= 0:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / total))


def train_egodpnet(ds: Dataset, cfg: TrainConfig, out_dir=None, resume=None) -> DPTrainResult:
    """Adam (cosine-decayed step size) on the dense-pose loss over the training frames."""
    cfg.validate()
    ids = ds.train_ids[: cfg.frame_limit or None]
    if not ids:
        raise TrainError("dataset has no training frames")
    imgs, iuvs = _load_dp_data(ds, ids)
    set_deterministic(cfg.seed)
    net = EgoDPNet(ds.cfg.parts, input_size=imgs.shape[1:3])
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr_dp)
    start = 0
    if resume is not None:
        ck = load_checkpoint(resume)
        net.load_state_dict(ck.modules["egodpnet"])
        opt.load_state_dict(ck.optimizers["egodpnet"])
        start = ck.step
    out = Path(out_dir) if out_dir is not None else None
    logger = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        logger = CSVLog(out / "dpnet_loss.csv", ["step", "loss"], append=resume is not None)
    losses = []
    net.train()
    for step in range(start, cfg.steps):
        for g in opt.param_groups:
            g["lr"] = cosine_lr(cfg.lr_dp, step, cfg.steps)
        x, part, uv = _dp_batch(imgs, iuvs, batch_indices(len(ids), cfg.batch, cfg.seed, step))
        logits, pred_uv = net(x)
        loss = egodp_loss(logits, pred_uv, part, uv)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite Ego-DPNet loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if logger:
            logger.write({"step": step, "loss": losses[-1]})
    if logger:
        logger.close()
    ck_path = None
    if out is not None:
        ck_path = out / "egodpnet.ckpt"
        save_checkpoint(ck_path, cfg.steps, {"egodpnet": net}, {"egodpnet": opt},
                        extra={"train_config": asdict(cfg)})
    net.eval()
    return DPTrainResult(net, losses, ck_path)


def load_egodpnet(path) -> EgoDPNet:
    ck = load_checkpoint(path)
    if "egodpnet" not in ck.modules:
        raise TrainError(f"{path} holds no Ego-DPNet")
    net = ck.build("egodpnet")
    net.eval()
    return net


def evaluate_egodpnet(net: EgoDPNet, ds: Dataset, ids: Sequence[int]) -> Dict[str, float]:
    """Foreground part accuracy and mean UV distance on correctly labelled pixels."""
    from .synthgen import load_rgb
    correct = total = 0
    uv_err, uv_n = 0.0, 0
    for i in ids:
        gt = decode_iuv(ds.ego_iuv_array(i))
        pred = egodp_predict(net, load_rgb(ds.frame_dir(i) / "ego.png"))
        fg = gt.part > 0
        hit = fg & (pred.part == gt.part)
        correct += int(hit.sum())
        total += int(fg.sum())
        if hit.any():
            uv_err += float(np.linalg.norm(pred.uv[hit] - gt.uv[hit], axis=1).sum())
            uv_n += int(hit.sum())
    return {"part_accuracy": correct / max(total, 1), "uv_error": uv_err / max(uv_n, 1),
            "foreground_pixels": total}


# --- RenderNet stage ---------------------------------------------------------------------

@dataclass
class RenderItem:
    frame_id: int
    view: int
    target: np.ndarray       # (H,W,3) uint8
    background: np.ndarray   # (H,W,3) uint8
    pose_iuv: IUVImage
    plan: SamplingPlan
    head_pixel: Optional[np.ndarray]


class RenderData:
    """Training/eval items (frame, view) with everything but the ego-side texture precomputed."""

    def __init__(self, ds: Dataset, frame_ids: Sequence[int], views: Sequence[int]):
        from .synthgen import load_rgb
        self.ds = ds
        self.layout = ds.layout
        self.items: List[RenderItem] = []
        self.ego: Dict[int, np.ndarray] = {}
        skel, _ = ds.body()
        for f in frame_ids:
            d = ds.frame_dir(f)
            self.ego[f] = to_uint8(load_rgb(d / "ego.png"))
            rec = ds.load(f, views)
            head = forward_kinematics(skel, rec.pose)[JOINT_INDEX["head"]][None]
            bg = to_uint8(ds.background(rec.background_id, "view"))
            for v, vr in zip(views, rec.views):
                pix, _, ok = project_world(head, vr.camera)
                self.items.append(RenderItem(
                    f, v, to_uint8(vr.image), bg, vr.iuv,
                    SamplingPlan.from_iuv(vr.iuv, self.layout.n_parts, self.layout.chart_size),
                    pix[0] if ok[0] else None))

    def __len__(self) -> int:
        return len(self.items)

    def ego_image(self, frame_id: int) -> np.ndarray:
        return self.ego[frame_id].astype(np.float64) / 255.0


def _img_tensor(arrs: Sequence[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(arrs)).permute(0, 3, 1, 2).float() / 255.0


def pose_encoding(iuv: IUVImage, n_parts: int) -> torch.Tensor:
    """(P+3,H,W): one-hot part (background channel first) followed by u, v."""
    part = torch.from_numpy(iuv.part.astype(np.int64))
    onehot = F.one_hot(part, n_parts + 1).permute(2, 0, 1).float()
    uv = torch.from_numpy(np.where(iuv.mask[..., None], iuv.uv, 0.0)).permute(2, 0, 1).float()
    return torch.cat([onehot, uv], 0)


class RenderModel(nn.Module):
    """Generator plus the variant's texture path (implicit stack and/or per-frame extractor)."""

    def __init__(self, variant: str, layout: AtlasLayout, tm_init: Optional[TextureStack] = None):
        super().__init__()
        if variant not in VARIANTS:
            raise TrainError(f"unknown variant {variant!r}")
        self.variant = variant
        self.spec = VARIANTS[variant]
        self.layout = layout
        self.generator = RenderNet(generator_channels(variant, layout.n_parts))
        self.ffn = FrameFeatureNet(FEA_NET_CHANNELS) if self.spec.per_frame_extractor else None
        self.tm = None
        if self.spec.uses_tm:
            S = layout.chart_size
            init = (torch.from_numpy(tm_init.data.reshape(-1, 3)).float() if tm_init is not None
                    else torch.full((layout.n_parts * S * S, 3), 0.5))
            self.tm = nn.Parameter(init, requires_grad=self.spec.tm_trainable)

    def tm_stack(self) -> Optional[TextureStack]:
        if self.tm is None:
            return None
        S = self.layout.chart_size
        return TextureStack(self.tm.detach().double().numpy().reshape(self.layout.n_parts, S, S, 3).copy())

    def generator_parameters(self) -> List[nn.Parameter]:
        ps = list(self.generator.parameters())
        if self.ffn is not None:
            ps += list(self.ffn.parameters())
        return ps

    def features(self, items: Sequence[RenderItem], egos: Sequence[Optional[np.ndarray]],
                 ego_iuvs: Sequence[Optional[IUVImage]]) -> torch.Tensor:
        """Generator input (B,C,H,W) for each item."""
        if self.spec.generator_input == "pose_encoding":
            return torch.stack([pose_encoding(it.pose_iuv, self.layout.n_parts) for it in items])
        outs = []
        for it, ego, pe in zip(items, egos, ego_iuvs):
            parts = []
            if self.spec.uses_te:
                te = extract_partial_texture(ego, pe, self.layout).data
                te = torch.from_numpy(te).float()
                if self.ffn is not None:
                    parts.append(self.ffn(te))
                else:
                    parts.append(te.reshape(-1, 3))
            if self.tm is not None:
                parts.append(self.tm)
            texels = parts[0] if len(parts) == 1 else torch.cat(parts, 1)
            outs.append(render_features(texels, it.plan).permute(2, 0, 1))
        return torch.stack(outs)

    def composite(self, raw: torch.Tensor, items: Sequence[RenderItem]) -> torch.Tensor:
        mask = torch.from_numpy(np.stack([it.pose_iuv.mask for it in items]))[:, None].float()
        bg = _img_tensor([it.background for it in items])
        return mask * raw + (1.0 - mask) * bg

    def forward(self, items, egos, ego_iuvs):
        feat = self.features(items, egos, ego_iuvs)
        return feat, self.composite(self.generator(feat), items)


@dataclass
class RenderTrainResult:
    model: RenderModel
    discriminator: MultiScaleDiscriminator
    history: List[Dict[str, float]]
    checkpoint: Optional[Path]
    tm_initial: Optional[TextureStack]


LOSS_COLUMNS = ["step", "L_D", "L_adv", "L_p", "L_face", "L_G"]


class EgoPoseProvider:
    """P_e per frame: dataset ground truth, or predicted (precomputed up front or on demand)."""

    def __init__(self, ds: Dataset, mode: str, net: Optional[EgoDPNet], precompute: bool,
                 frame_ids: Sequence[int], ego_images: Callable[[int], np.ndarray]):
        if mode == "predicted" and net is None:
            raise TrainError("predicted ego pose needs an Ego-DPNet checkpoint")
        self.ds, self.mode, self.net, self._img = ds, mode, net, ego_images
        self.cache: Dict[int, IUVImage] = {}
        if mode == "predicted" and precompute:
            for f in frame_ids:
                self.cache[f] = egodp_predict(net, self._img(f))
        self.precompute = precompute

    def __call__(self, frame_id: int) -> IUVImage:
        if self.mode == "ground_truth":
            if frame_id not in self.cache:
                self.cache[frame_id] = decode_iuv(self.ds.ego_iuv_array(frame_id))
            return self.cache[frame_id]
        if self.precompute:
            return self.cache[frame_id]
        return egodp_predict(self.net, self._img(frame_id))


def init_tm(data: RenderData, pe: EgoPoseProvider) -> TextureStack:
    frames = sorted({it.frame_id for it in data.items})
    return init_implicit_stack(((data.ego_image(f), pe(f)) for f in frames), data.layout)


def _gather(model: RenderModel, data: RenderData, idx, pe: Optional[EgoPoseProvider]):
    items = [data.items[i] for i in idx]
    if model.spec.uses_te:
        egos = [data.ego_image(it.frame_id) for it in items]
        pes = [pe(it.frame_id) for it in items]
    else:
        egos = pes = [None] * len(items)
    return items, egos, pes


def train_rendernet(ds: Dataset, cfg: TrainConfig, egodp: Optional[EgoDPNet] = None, out_dir=None,
                    resume=None, face_embedder: Optional[nn.Module] = None,
                    extractor: Optional[nn.Module] = None, data: Optional[RenderData] = None,
                    frame_ids: Optional[Sequence[int]] = None) -> RenderTrainResult:
    """Alternating generator/discriminator Adam steps for ``cfg.variant``."""
    cfg.validate()
    spec = VARIANTS[cfg.variant]
    if cfg.face_loss and cfg.lambda_face > 0 and face_embedder is None:
        raise TrainError("face loss enabled with lambda_face > 0 but no face embedder supplied")
    if any(v >= ds.cfg.n_external_views for v in cfg.views):
        raise TrainError(f"views {cfg.views} exceed the dataset's {ds.cfg.n_external_views} cameras")
    if frame_ids is None:
        frame_ids = ds.train_ids[: cfg.frame_limit or None]
    if not frame_ids:
        raise TrainError("no training frames")
    if data is None:
        data = RenderData(ds, frame_ids, cfg.views)
    pe = None
    if spec.uses_te or spec.uses_tm:
        pe = EgoPoseProvider(ds, cfg.ego_pose, egodp, cfg.precompute, frame_ids, data.ego_image)
    tm0 = init_tm(data, pe) if spec.uses_tm else None

    set_deterministic(cfg.seed)
    model = RenderModel(cfg.variant, data.layout, tm0)
    D = MultiScaleDiscriminator(model.generator.in_ch)
    extractor = extractor if extractor is not None else RandomFeaturePyramid(seed=cfg.perceptual_seed)
    betas = (cfg.beta1, cfg.beta2)
    opt_g = torch.optim.Adam(model.generator_parameters(), lr=cfg.lr_g, betas=betas)
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.d_lr, betas=betas)
    opt_tm = (torch.optim.Adam([model.tm], lr=cfg.lr_tm, betas=betas)
              if model.tm is not None and spec.tm_trainable else None)
    start = 0
    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.meta["extra"].get("variant") != cfg.variant:
            raise TrainError(f"checkpoint variant {ck.meta['extra'].get('variant')!r} != {cfg.variant!r}")
        model.generator.load_state_dict(ck.modules["generator"])
        D.load_state_dict(ck.modules["discriminator"])
        if model.ffn is not None:
            model.ffn.load_state_dict(ck.modules["frame_feature_net"])
        if model.tm is not None:
            with torch.no_grad():
                model.tm.copy_(ck.tensors["T_m"])
        opt_g.load_state_dict(ck.optimizers["generator"])
        opt_d.load_state_dict(ck.optimizers["discriminator"])
        if opt_tm is not None:
            opt_tm.load_state_dict(ck.optimizers["T_m"])
        start = ck.step

    out = Path(out_dir) if out_dir is not None else None
    logger = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        logger = CSVLog(out / "loss.csv", LOSS_COLUMNS, append=resume is not None)

    def checkpoint(step):
        mods = {"generator": model.generator, "discriminator": D}
        opts = {"generator": opt_g, "discriminator": opt_d}
        if model.ffn is not None:
            mods["frame_feature_net"] = model.ffn
        if opt_tm is not None:
            opts["T_m"] = opt_tm
        tensors = {"T_m": model.tm} if model.tm is not None else {}
        path = out / "render.ckpt"
        save_checkpoint(path, step, mods, opts, tensors, extra={
            "variant": cfg.variant, "layout": data.layout.to_dict(), "train_config": asdict(cfg)})
        return path

    history = []
    model.train()
    D.train()
    for step in range(start, cfg.steps):
        idx = batch_indices(len(data), cfg.batch, cfg.seed, step)
        items, egos, pes = _gather(model, data, idx, pe)
        feat, fake = model(items, egos, pes)
        real = _img_tensor([it.target for it in items])
        L_D, L_adv = adversarial_step_losses(D, feat, real, fake)
        parts = {"L_adv": L_adv, "L_p": perceptual_loss(extractor, fake, real),
                 "L_face": face_identity_loss(face_embedder, fake, real, [it.head_pixel for it in items],
                                              cfg.face_radius, cfg.face_loss)}
        L_G = total_generator_loss(cfg, parts)
        if not (torch.isfinite(L_G) and torch.isfinite(L_D)):
            raise FloatingPointError(f"non-finite loss at step {step}")
        opt_g.zero_grad()
        if opt_tm is not None:
            opt_tm.zero_grad()
        L_G.backward()
        opt_g.step()
        if opt_tm is not None:
            opt_tm.step()
        opt_d.zero_grad()
        L_D.backward()
        opt_d.step()
        row = {"step": step, "L_D": L_D.item(), "L_adv": L_adv.item(), "L_p": parts["L_p"].item(),
               "L_face": parts["L_face"].item(), "L_G": L_G.item()}
        history.append(row)
        if logger and cfg.log_every and step % cfg.log_every == 0:
            logger.write(row)
        if out is not None and cfg.val_every and (step + 1) % cfg.val_every == 0:
            (out / "val").mkdir(exist_ok=True)
            save_rgb(out / "val" / f"step_{step + 1:06d}.png",
                     fake[0].detach().permute(1, 2, 0).double().numpy())
        if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            checkpoint(step + 1)
    if logger:
        logger.close()
    ck_path = checkpoint(cfg.steps) if out is not None else None
    model.eval()
    return RenderTrainResult(model, D, history, ck_path, tm0)


def load_render_model(path) -> RenderModel:
    ck = load_checkpoint(path)
    extra = ck.meta["extra"]
    lay = extra["layout"]
    model = RenderModel(extra["variant"], AtlasLayout(lay["P"], lay["S"]))
    model.generator.load_state_dict(ck.modules["generator"])
    if model.ffn is not None:
        model.ffn.load_state_dict(ck.modules["frame_feature_net"])
    if model.tm is not None:
        with torch.no_grad():
            model.tm.copy_(ck.tensors["T_m"])
    model.eval()
    return model


def render_items(model: RenderModel, data: RenderData, pe: Optional[EgoPoseProvider],
                 batch: int = 8) -> np.ndarray:
    """Composited generator outputs (N,H,W,3) in [0,1] for every item of ``data``."""
    model.eval()
    outs = []
    with torch.no_grad():
        for s in range(0, len(data), batch):
            items, egos, pes = _gather(model, data, range(s, min(s + batch, len(data))), pe)
            outs.append(model(items, egos, pes)[1].permute(0, 2, 3, 1).double().numpy())
    return np.concatenate(outs) if outs else np.zeros((0,))
