"""``egorender`` command line: synth, train-dpnet, train-render, render, eval, ablate, texture-export."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import yaml

log = logging.getLogger("egorender")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class MissingArtifact(Exception):
    pass


# --- run configuration ----------------------------------------------------------------------

def _sections() -> Dict[str, Dict[str, Any]]:
    from .synthgen import GenConfig
    from .training import TrainConfig
    train = dataclasses.asdict(TrainConfig())
    train.pop("stage")
    return {
        "gen": dataclasses.asdict(GenConfig()),
        "train": train,
        "eval": {"variants": ["im_tex", "ex_tex", "only_ego", "only_mv", "pix2pixhd", "fea_net"],
                 "holdout_views": [1], "n_test": 0, "masked": False},
        "paths": {"dataset": "data", "out": "out", "dpnet": "", "render": "", "workers": 1},
    }


DEFAULTS = _sections()
SHARED_KEYS = {"seed"}  # one flag sets the key in every section that has it


def key_index() -> Dict[str, List[str]]:
    """flat key -> sections holding it."""
    idx: Dict[str, List[str]] = {}
    for sec, keys in DEFAULTS.items():
        for k in keys:
            idx.setdefault(k, []).append(sec)
    for k, secs in idx.items():
        if len(secs) > 1 and k not in SHARED_KEYS:
            raise RuntimeError(f"config key {k!r} is ambiguous across {secs}")
    return idx


def _coerce(default, text: str):
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"expected a boolean, got {text!r}")
    if isinstance(default, list):
        items = [s for s in text.split(",") if s.strip()]
        if default and isinstance(default[0], int):
            return [int(s) for s in items]
        return [s.strip() for s in items]
    if default is None:
        return None if text.lower() in ("", "none", "null") else float(text)
    try:
        return type(default)(text)
    except ValueError as e:
        raise UsageError(f"cannot parse {text!r} as {type(default).__name__}") from e


def merge_config(base: dict, overrides: dict) -> dict:
    """Merge a nested override dict into a copy of ``base``, rejecting unknown keys."""
    out = {s: dict(v) for s, v in base.items()}
    for sec, vals in overrides.items():
        if sec not in out:
            raise UsageError(f"unknown config section {sec!r}; expected one of {sorted(out)}")
        if not isinstance(vals, dict):
            raise UsageError(f"config section {sec!r} must be a mapping")
        for k, v in vals.items():
            if k not in out[sec]:
                raise UsageError(f"unknown config key {sec}.{k}")
            out[sec][k] = v
    return out


def set_flat(cfg: dict, key: str, value) -> None:
    idx = key_index()
    sec_key = key.split(".", 1)
    if len(sec_key) == 2:
        sec, k = sec_key
        if sec not in cfg or k not in cfg[sec]:
            raise UsageError(f"unknown config key {key}")
        cfg[sec][k] = _coerce(DEFAULTS[sec][k], value) if isinstance(value, str) else value
        return
    k = key.replace("-", "_")
    if k not in idx:
        raise UsageError(f"unknown config key {key}")
    for sec in idx[k]:
        cfg[sec][k] = _coerce(DEFAULTS[sec][k], value) if isinstance(value, str) else value


def effective_config(args) -> dict:
    cfg = {s: dict(v) for s, v in DEFAULTS.items()}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise MissingArtifact(f"config file {path} not found")
        data = yaml.safe_load(path.read_text()) or {}
        if not isinstance(data, dict):
            raise UsageError(f"{path}: top level must be a mapping")
        cfg = merge_config(cfg, data)
    for k in key_index():
        v = getattr(args, "cfg_" + k, None)
        if v is not None:
            set_flat(cfg, k, v)
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        set_flat(cfg, k.strip(), v)
    if args.seed is not None:
        set_flat(cfg, "seed", str(args.seed))
    return cfg


def echo_config(cfg: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))


def gen_config(cfg: dict):
    from .synthgen import GenConfig
    return GenConfig.from_dict(cfg["gen"])


def train_config(cfg: dict, stage: str):
    from .training import TrainConfig
    return TrainConfig.from_dict({**cfg["train"], "stage": stage})


def open_dataset(path):
    from .synthgen import Dataset, DatasetError
    try:
        return Dataset(path)
    except DatasetError as e:
        raise MissingArtifact(str(e)) from e


def need_file(path: str, what: str) -> Path:
    if not path:
        raise MissingArtifact(f"{what} checkpoint not given (set paths.{what} / --{what})")
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"{what} checkpoint {p} not found")
    return p


# --- commands ---------------------------------------------------------------------------------

def cmd_synth(cfg: dict, args) -> int:
    from .synthgen import DatasetError, generate_dataset
    try:
        gc = gen_config(cfg)
        gc.validate()
    except DatasetError as e:
        raise UsageError(str(e)) from e
    out = Path(cfg["paths"]["out"])
    meta = generate_dataset(gc, out, workers=int(cfg["paths"]["workers"]))
    echo_config(cfg, out)
    print(f"wrote {len(meta['records'])} frames to {out}")
    return EXIT_OK


def cmd_train_dpnet(cfg: dict, args) -> int:
    from .training import evaluate_egodpnet, train_egodpnet
    ds = open_dataset(cfg["paths"]["dataset"])
    tc = train_config(cfg, "dpnet")
    out = Path(cfg["paths"]["out"])
    echo_config(cfg, out)
    resume = Path(args.resume) if args.resume else None
    if resume is not None and not resume.exists():
        raise MissingArtifact(f"resume checkpoint {resume} not found")
    res = train_egodpnet(ds, tc, out, resume=resume)
    if ds.test_ids:
        metrics = evaluate_egodpnet(res.net, ds, ds.test_ids)
        (out / "dpnet_eval.json").write_text(json.dumps(metrics, indent=1))
        print(f"held-out part accuracy {metrics['part_accuracy']:.4f}, UV error {metrics['uv_error']:.4f}")
    print(f"checkpoint {res.checkpoint}")
    return EXIT_OK


def _load_dpnet_if_needed(cfg: dict, variant: str, uses_ego: bool):
    from .training import load_egodpnet
    if uses_ego and cfg["train"]["ego_pose"] == "predicted":
        return load_egodpnet(need_file(cfg["paths"]["dpnet"], "dpnet"))
    return None


def cmd_train_render(cfg: dict, args) -> int:
    from .training import VARIANTS, train_rendernet
    ds = open_dataset(cfg["paths"]["dataset"])
    tc = train_config(cfg, "render")
    tc.validate()
    spec = VARIANTS[tc.variant]
    egodp = _load_dpnet_if_needed(cfg, tc.variant, spec.uses_te or spec.uses_tm)
    out = Path(cfg["paths"]["out"])
    echo_config(cfg, out)
    resume = Path(args.resume) if args.resume else None
    if resume is not None and not resume.exists():
        raise MissingArtifact(f"resume checkpoint {resume} not found")
    res = train_rendernet(ds, tc, egodp=egodp, out_dir=out, resume=resume)
    print(f"checkpoint {res.checkpoint}")
    return EXIT_OK


def _parse_sweep(text: str) -> List[float]:
    key, _, rng = text.partition("=")
    if key.strip() != "az":
        raise UsageError("--sweep supports az=<start>:<stop>:<step>")
    try:
        start, stop, step = (float(s) for s in rng.split(":"))
    except ValueError as e:
        raise UsageError(f"bad sweep range {rng!r}") from e
    if step <= 0 or stop <= start:
        raise UsageError("sweep needs start < stop and a positive step")
    return list(np.arange(start, stop - 1e-9, step))


def _view_specs(cfg: dict, args, frame_rec) -> List[tuple]:
    """[(name, ViewSpec)] from --camera / --gt-view / --view / --sweep."""
    from .geometry import RigidTransform, load_camera
    from .posecon import PoseConError, ViewSpec, parse_view
    gc = gen_config(cfg)
    root = RigidTransform.identity()
    if args.root:
        p = Path(args.root)
        if not p.exists():
            raise MissingArtifact(f"root transform {p} not found")
        root = RigidTransform.from_dict(json.loads(p.read_text()))
    kw = dict(coords=args.coords, size=gc.view_size, focal=gc.view_focal, root=root)
    try:
        if args.gt_view is not None:
            if frame_rec is None:
                raise UsageError("--gt-view needs --frame")
            # the frame record was loaded with just the requested view
            return [(f"view{args.gt_view}", ViewSpec(camera=frame_rec.views[0].camera,
                                                     **{**kw, "coords": "global"}))]
        if args.camera:
            p = Path(args.camera)
            if not p.exists():
                raise MissingArtifact(f"camera file {p} not found")
            return [("camera", ViewSpec(camera=load_camera(p), **kw))]
        base = parse_view(args.view or "", **kw)
        if args.sweep:
            return [(f"az{int(round(a)):03d}", dataclasses.replace(base, azimuth=float(a)))
                    for a in _parse_sweep(args.sweep)]
        return [("view", base)]
    except PoseConError as e:
        raise UsageError(str(e)) from e


def cmd_render(cfg: dict, args) -> int:
    import torch
    from .body import JointTargets15
    from .nets import egodp_predict
    from .posecon import construct_target_pose
    from .raster import SamplingPlan, iuv_preview
    from .synthgen import head_rotation_from_ego, load_rgb, save_rgb, to_uint8
    from .textures import extract_partial_texture, texture_preview
    from .training import RenderItem, load_egodpnet, load_render_model, pose_encoding
    from .evalkit import l1

    model = load_render_model(need_file(cfg["paths"]["render"], "render"))
    ds = open_dataset(cfg["paths"]["dataset"]) if (args.frame is not None or not args.ego) else None
    rec = None
    if args.frame is not None:
        if args.frame >= len(ds):
            raise UsageError(f"frame {args.frame} not in dataset of {len(ds)} frames")
        rec = ds.load(args.frame, [args.gt_view] if args.gt_view is not None else [])
        ego = rec.ego
        joints = rec.joints
    else:
        if not args.ego:
            raise UsageError("give --frame <id> or --ego <image> --joints <joints.json>")
        if not Path(args.ego).exists():
            raise MissingArtifact(f"ego image {args.ego} not found")
        if not args.joints:
            raise UsageError("--ego needs --joints (no pose estimator is bundled)")
        ego = load_rgb(args.ego)
        joints = JointTargets15.from_dict(json.loads(Path(args.joints).read_text()))
    skel, mesh = ds.body() if ds is not None else _default_body(cfg)
    pe = None
    if model.spec.uses_te:
        if cfg["train"]["ego_pose"] == "ground_truth" and rec is not None:
            pe = rec.ego_iuv
        else:
            pe = egodp_predict(load_egodpnet(need_file(cfg["paths"]["dpnet"], "dpnet")), ego)
    views = _view_specs(cfg, args, rec)
    out = Path(cfg["paths"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out)
    results = {}
    # a dataset frame carries the ego camera pose, which fixes the head orientation
    head_rot = head_rotation_from_ego(rec.ego_camera, ds.cfg) if rec is not None else None
    for name, view in views:
        pt, _, head = construct_target_pose(joints, view, skel, mesh, head_rot)
        H, W = pt.shape
        bg = (to_uint8(ds.background(rec.background_id, "view")) if rec is not None
              and (W, H) == (ds.cfg.view_size, ds.cfg.view_size) else np.zeros((H, W, 3), np.uint8))
        item = RenderItem(-1, -1, bg, bg, pt, SamplingPlan.from_iuv(pt, model.layout.n_parts,
                                                                     model.layout.chart_size), head)
        with torch.no_grad():
            feat, img = model([item], [ego], [pe])
        img = img[0].permute(1, 2, 0).double().numpy()
        if not np.all(np.isfinite(img)):
            raise FloatingPointError("non-finite pixels in rendered avatar")
        save_rgb(out / f"{name}.png", img)
        if args.debug:
            dbg = out / "debug"
            dbg.mkdir(exist_ok=True)
            save_rgb(dbg / f"{name}_pt.png", iuv_preview(pt))
            f = feat[0].permute(1, 2, 0).double().numpy()
            if model.spec.generator_input == "feature_image":
                for c0 in range(0, min(f.shape[2], 6), 3):
                    save_rgb(dbg / f"{name}_feature_{c0 // 3}.png", np.clip(f[..., c0:c0 + 3], 0, 1))
        if args.gt_view is not None and rec is not None:
            gt = rec.views[0].image
            results[name] = {"l1": l1(img, to_uint8(gt).astype(np.float64) / 255.0)}
            print(f"{name}: L1 vs stored view = {results[name]['l1']:.5f}")
    if args.debug:
        dbg = out / "debug"
        dbg.mkdir(exist_ok=True)
        save_rgb(dbg / "ego.png", ego)
        if pe is not None:
            save_rgb(dbg / "pe.png", iuv_preview(pe))
            save_rgb(dbg / "te.png", texture_preview(extract_partial_texture(ego, pe, model.layout)))
    if results:
        (out / "metrics.json").write_text(json.dumps(results, indent=1))
    print(f"wrote {len(_view_specs(cfg, args, rec))} image(s) to {out}")
    return EXIT_OK


def _default_body(cfg: dict):
    from .body import BodyConfig, build_canonical_body
    return build_canonical_body(BodyConfig(parts=int(cfg["gen"]["parts"])))


def _run_report(cfg: dict, variants: List[str], models=None) -> int:
    from .evalkit import EvalError, run_ablation
    from .training import VARIANTS
    ds = open_dataset(cfg["paths"]["dataset"])
    tc = train_config(cfg, "render")
    tc.validate()
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise UsageError(f"unknown variants {bad}")
    needs_ego = any(VARIANTS[v].uses_te or VARIANTS[v].uses_tm for v in variants)
    egodp = _load_dpnet_if_needed(cfg, variants[0], needs_ego)
    out = Path(cfg["paths"]["out"])
    echo_config(cfg, out)
    ev = cfg["eval"]
    try:
        rep = run_ablation(ds, variants, tc, ev["holdout_views"], out_dir=out, egodp=egodp,
                           n_test=int(ev["n_test"]), masked=bool(ev["masked"]), models=models)
    except EvalError as e:
        raise UsageError(str(e)) from e
    print((out / "report.md").read_text())
    print(f"config fingerprint {rep.fingerprint}")
    return EXIT_OK


def cmd_eval(cfg: dict, args) -> int:
    from .training import load_render_model
    model = load_render_model(need_file(cfg["paths"]["render"], "render"))
    cfg["train"]["variant"] = model.variant
    return _run_report(cfg, [model.variant], models={model.variant: model})


def cmd_ablate(cfg: dict, args) -> int:
    return _run_report(cfg, list(cfg["eval"]["variants"]))


def cmd_texture_export(cfg: dict, args) -> int:
    from .atlas import save_texture
    from .synthgen import save_rgb
    from .textures import texture_preview
    from .training import load_render_model
    model = load_render_model(need_file(cfg["paths"]["render"], "render"))
    tm = model.tm_stack()
    if tm is None:
        raise UsageError(f"variant {model.variant} has no implicit texture stack")
    out = Path(cfg["paths"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_texture(out / "T_m.tex", tm)
    save_rgb(out / "T_m.png", texture_preview(tm))
    echo_config(cfg, out)
    print(f"wrote {out / 'T_m.tex'} (checksum {tm.checksum()[:16]})")
    return EXIT_OK


COMMANDS = {
    "synth": (cmd_synth, "render a synthetic egocentric + multi-view dataset"),
    "train-dpnet": (cmd_train_dpnet, "train the dense-pose network on a dataset"),
    "train-render": (cmd_train_render, "train the person-specific generator for one variant"),
    "render": (cmd_render, "render an avatar from an ego frame for chosen viewpoints"),
    "eval": (cmd_eval, "evaluate a trained generator on the hold-out splits"),
    "ablate": (cmd_ablate, "train and evaluate several variants, write a comparison table"),
    "texture-export": (cmd_texture_export, "export the learned implicit texture stack"),
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run config (sections gen/train/eval/paths)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--seed", type=int, help="seed for every random stream")
    p.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    g = p.add_argument_group("config keys (each also settable in the YAML file)")
    for k, secs in key_index().items():
        if k == "seed":
            continue
        d = DEFAULTS[secs[0]][k]
        shown = ",".join(map(str, d)) if isinstance(d, list) else d
        g.add_argument("--" + k.replace("_", "-"), dest="cfg_" + k, metavar="V",
                       help=f"{'/'.join(secs)}.{k} (default: {shown})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="egorender", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        _add_common(p)
        if name in ("train-dpnet", "train-render"):
            p.add_argument("--resume", help="checkpoint to continue from")
        if name == "render":
            p.add_argument("--frame", type=int, help="dataset frame id to take the ego image and joints from")
            p.add_argument("--ego", help="ego image file (with --joints)")
            p.add_argument("--joints", help="JSON with 15 target joints")
            p.add_argument("--view", help="az=<deg>,el=<deg>,dist=<m>")
            p.add_argument("--camera", help="pinhole camera JSON")
            p.add_argument("--sweep", help="az=<start>:<stop>:<step> viewpoint grid")
            p.add_argument("--gt-view", type=int, help="use stored external camera k and report L1 against it")
            p.add_argument("--coords", choices=("local", "global"), default="local")
            p.add_argument("--root", help="root transform JSON for global coordinates")
            p.add_argument("--debug", action="store_true", help="also write intermediate images")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    import os
    if os.environ.get("EGORENDER_DETERMINISTIC") == "1":
        import torch
        torch.use_deterministic_algorithms(True)
    try:
        cfg = effective_config(args)
        if args.print_config:
            print(yaml.safe_dump(cfg, sort_keys=True), end="")
            return EXIT_OK
        return COMMANDS[args.command][0](cfg, args)
    except UsageError as e:
        print(f"egorender {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingArtifact, FileNotFoundError) as e:
        print(f"egorender {args.command}: missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except FloatingPointError as e:
        print(f"egorender {args.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"egorender {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
