"""Command-line entry point: gen | train | infer | eval | viz.

One declarative run config drives every command. Values resolve in
precedence order: built-in defaults < config file (--config, YAML) <
FLOWDIFF_SEED environment variable (seed only) < command-line flags
(--seed/--out-dir and repeated --set key.path=value overrides). The resolved
config and its content hash are embedded in every JSON artifact, checkpoint
manifest and PNG written, so results stay traceable to their settings.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np
import yaml
from PIL import Image, PngImagePlugin

from . import dataio, diffusion, refine as refine_mod, train as train_mod, viz
from .augment import augment_sample, get_preset
from .dataio import Sample, ToyConfig, gen_toy_sample, read_flo, write_flo
from .denoiser import DenoiserConfig, FlowDenoiser, make_denoiser_fn
from .flowcore import FlowField, ImagePair, compute_metrics

DEFAULT_CONFIG = {
    "seed": 0,
    "out_dir": "runs/toy",
    "data": {
        "image_size": [64, 64],
        "n_sprites": [1, 2],
        "kinds": ["rectangle", "ellipse", "polygon"],
        "sprite_radius": [6.0, 13.0],
        "max_translation": 5.0,
        "max_rotation": 0.15,
        "scale_change": [0.92, 1.08],
        "bg_translation": 3.5,
        "seed": 100,
        "eval_seed": 999,
    },
    "schedule": {"n_steps": 64, "kind": "cosine"},
    "model": {
        "base_channels": 16,
        "channel_mults": [1, 2, 3, 4],
        "blocks_per_stage": 1,
        "time_embed_dim": 64,
        "use_correlation": False,
        "lookup_radius": 4,
        "feature_dim": 96,
        "encoder_channels": 24,
        "encoder_blocks": 1,
        "loss": "l1",
    },
    "train": {
        "batch_size": 8,
        "lr": 1.0e-4,
        "total_steps": 2000,
        "ema_decay": 0.999,
        "eval_every": 500,
        "lr_window": 200,
        "lr_spike_factor": 5.0,
        "lr_floor": 1.0e-6,
        "n_train": None,
        "eval_samples": 16,
    },
    # augmentation: preset picks the documented constants; any non-null
    # field below overrides the preset's value
    "augment": {
        "enabled": False,
        "preset": "raft_it",
        "min_scale": None,
        "max_scale": None,
        "max_stretch": None,
        "stretch_prob": None,
        "hflip_prob": None,
        "vflip_prob": None,
        "brightness": None,
        "contrast": None,
        "saturation": None,
        "hue": None,
        "asymmetric_prob": None,
        "noise_enabled": None,
        "noise_sigma_max": None,
    },
    "refine": {
        "mode": "none",
        "T": 4,
        "patch_size": [64, 64],
        "overlap": 0.5,
        "low_res": [64, 64],
    },
}


def _deep_update(base: dict, patch: dict, path="") -> dict:
    for key, val in patch.items():
        if key not in base:
            raise ValueError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            _deep_update(base[key], val, path + key + ".")
        else:
            base[key] = val
    return base


def _set_path(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if k not in node or not isinstance(node[k], dict):
            raise ValueError(f"unknown config key {dotted!r}")
        node = node[k]
    if keys[-1] not in node:
        raise ValueError(f"unknown config key {dotted!r}")
    node[keys[-1]] = value


def resolve_config(config_file=None, sets=(), seed=None, out_dir=None) -> dict:
    """Defaults, then file, then FLOWDIFF_SEED, then explicit flags."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if config_file:
        with open(config_file) as f:
            loaded = yaml.safe_load(f) or {}
        _deep_update(cfg, loaded)
    env_seed = os.environ.get("FLOWDIFF_SEED")
    if env_seed is not None:
        cfg["seed"] = int(env_seed)
    for item in sets or ():
        if "=" not in item:
            raise ValueError(f"--set expects key.path=value, got {item!r}")
        key, _, raw = item.partition("=")
        _set_path(cfg, key.strip(), yaml.safe_load(raw))
    if seed is not None:
        cfg["seed"] = seed
    if out_dir is not None:
        cfg["out_dir"] = out_dir
    return cfg


def config_hash(cfg: dict) -> str:
    """Git-style blob hash of the canonical JSON encoding."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(b"blob %d\x00" % len(blob) + blob).hexdigest()


def _tuple2(v):
    return (int(v[0]), int(v[1]))


def toy_config(cfg: dict) -> ToyConfig:
    d = cfg["data"]
    return ToyConfig(
        image_size=_tuple2(d["image_size"]),
        n_sprites=(int(d["n_sprites"][0]), int(d["n_sprites"][1])),
        kinds=tuple(d["kinds"]),
        sprite_radius=(float(d["sprite_radius"][0]), float(d["sprite_radius"][1])),
        max_translation=float(d["max_translation"]),
        max_rotation=float(d["max_rotation"]),
        scale_change=(float(d["scale_change"][0]), float(d["scale_change"][1])),
        bg_translation=float(d["bg_translation"]),
        seed=int(d["seed"]),
    )


def denoiser_config(cfg: dict) -> DenoiserConfig:
    m = cfg["model"]
    return DenoiserConfig(
        base_channels=int(m["base_channels"]),
        channel_mults=tuple(m["channel_mults"]),
        blocks_per_stage=int(m["blocks_per_stage"]),
        time_embed_dim=int(m["time_embed_dim"]),
        use_correlation=bool(m["use_correlation"]),
        lookup_radius=int(m["lookup_radius"]),
        feature_dim=int(m["feature_dim"]),
        encoder_channels=int(m["encoder_channels"]),
        encoder_blocks=int(m["encoder_blocks"]),
        loss=str(m["loss"]),
    )


def train_config(cfg: dict) -> train_mod.TrainConfig:
    t = cfg["train"]
    return train_mod.TrainConfig(
        batch_size=int(t["batch_size"]),
        lr=float(t["lr"]),
        total_steps=int(t["total_steps"]),
        ema_decay=float(t["ema_decay"]),
        eval_every=int(t["eval_every"]),
        lr_window=int(t["lr_window"]),
        lr_spike_factor=float(t["lr_spike_factor"]),
        lr_floor=float(t["lr_floor"]),
        seed=int(cfg["seed"]),
        n_train=None if t["n_train"] is None else int(t["n_train"]),
    )


def refine_config(cfg: dict) -> refine_mod.RefineConfig:
    r = cfg["refine"]
    return refine_mod.RefineConfig(
        T=int(r["T"]),
        patch_size=_tuple2(r["patch_size"]),
        overlap=float(r["overlap"]),
        mode=str(r["mode"]),
        low_res=_tuple2(r["low_res"]),
    )


def make_schedule_from(cfg: dict):
    return diffusion.make_schedule(int(cfg["schedule"]["n_steps"]),
                                   str(cfg["schedule"]["kind"]))


def build_model(cfg: dict) -> FlowDenoiser:
    import torch

    torch.manual_seed(int(cfg["seed"]))
    return FlowDenoiser(denoiser_config(cfg))


# ---------------------------------------------------------------------------
# image helpers


def _save_png(img01: np.ndarray, path, cfg=None) -> None:
    data = np.clip(np.round(img01 * 255.0), 0, 255).astype(np.uint8)
    meta = PngImagePlugin.PngInfo()
    if cfg is not None:
        meta.add_text("flowdiff_config_hash", config_hash(cfg))
    Image.fromarray(data).save(path, pnginfo=meta)


def _load_image(path) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return img / 255.0


def _pad_to_multiple(img: np.ndarray, multiple: int):
    h, w = img.shape[:2]
    ph = (multiple - h % multiple) % multiple
    pw = (multiple - w % multiple) % multiple
    if ph == 0 and pw == 0:
        return img, (h, w)
    return np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="reflect"), (h, w)


# ---------------------------------------------------------------------------
# commands


def augment_config(cfg: dict):
    """Preset constants with any non-null config field overriding them."""
    import dataclasses

    aug = cfg["augment"]
    acfg = get_preset(str(aug["preset"]), crop_size=_tuple2(cfg["data"]["image_size"]))
    overrides = {k: v for k, v in aug.items()
                 if k not in ("enabled", "preset") and v is not None}
    return dataclasses.replace(acfg, **overrides) if overrides else acfg


def make_sample_fn(cfg: dict):
    """Index-keyed toy stream with optional deterministic augmentation."""
    tcfg = toy_config(cfg)
    if not cfg["augment"]["enabled"]:
        return lambda i: gen_toy_sample(tcfg, i)
    acfg = augment_config(cfg)

    def fn(i: int) -> Sample:
        raw = gen_toy_sample(tcfg, i)
        return augment_sample(raw, acfg, np.random.default_rng([tcfg.seed, 3, i]))

    return fn


def eval_dataset_from_config(cfg: dict, n: int) -> list:
    d = cfg["data"]
    tcfg_eval = toy_config({**cfg, "data": {**d, "seed": d["eval_seed"]}})
    return [gen_toy_sample(tcfg_eval, i) for i in range(n)]


def cmd_gen(cfg: dict, n: int, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = toy_config(cfg)
    entries = []
    for i in range(n):
        s = gen_toy_sample(tcfg, i)
        names = {
            "frame1": f"frame1_{i:05d}.png",
            "frame2": f"frame2_{i:05d}.png",
            "flow": f"flow_{i:05d}.flo",
        }
        _save_png(s.pair.frame1, out / names["frame1"], cfg)
        _save_png(s.pair.frame2, out / names["frame2"], cfg)
        write_flo(s.flow, out / names["flow"])
        entries.append(names)
    manifest = {
        "config": cfg,
        "config_hash": config_hash(cfg),
        "n_samples": n,
        "entries": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote {n} samples to {out}")
    return out


def load_dataset_dir(path, limit=None) -> list:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    samples = []
    for entry in manifest["entries"][:limit]:
        pair = ImagePair(_load_image(root / entry["frame1"]),
                         _load_image(root / entry["frame2"]))
        samples.append(Sample(pair, read_flo(root / entry["flow"])))
    return samples


def cmd_train(cfg: dict, resume=None) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps({"config": cfg, "config_hash": config_hash(cfg)}, indent=2))
    sched = make_schedule_from(cfg)
    model = build_model(cfg)
    tc = train_config(cfg)
    state = None
    if resume is not None:
        state = train_mod.restore_train_state(resume, model, tc)
        print(f"resumed from {resume} at step {state.step}")
    eval_ds = eval_dataset_from_config(cfg, int(cfg["train"]["eval_samples"]))
    rcfg = refine_config(cfg)
    state = train_mod.fit(
        model, sched, tc, make_sample_fn(cfg),
        eval_dataset=eval_ds,
        refine_cfg=None if rcfg.mode == "none" else rcfg,
        out_dir=out, run_config=cfg, state=state,
    )
    final = out / "ckpt_final.zip"
    train_mod.save_train_checkpoint(state, cfg, final)
    print(f"final checkpoint: {final}")
    return final


def model_from_checkpoint(path):
    ck = dataio.load_checkpoint(path)
    cfg = _deep_update(copy.deepcopy(DEFAULT_CONFIG), ck.config) if ck.config else copy.deepcopy(DEFAULT_CONFIG)
    model = FlowDenoiser(denoiser_config(cfg))
    train_mod.load_weights_into(model, ck.ema_weights)
    return model, cfg, ck


def cmd_infer(cfg: dict, checkpoint, image1, image2, out_prefix, gt=None,
              use_ema=True) -> dict:
    ck = dataio.load_checkpoint(checkpoint)
    stored = _deep_update(copy.deepcopy(DEFAULT_CONFIG), ck.config) if ck.config else copy.deepcopy(DEFAULT_CONFIG)
    stored["refine"] = cfg["refine"]  # CLI flags control inference behavior
    stored["seed"] = cfg["seed"]
    model = FlowDenoiser(denoiser_config(stored))
    train_mod.load_weights_into(model, ck.ema_weights if use_ema else ck.weights)

    img1, _ = _pad_to_multiple(_load_image(image1), 8)
    img2, orig = _pad_to_multiple(_load_image(image2), 8)
    pair = ImagePair(img1, img2)

    sched = make_schedule_from(stored)
    rcfg = refine_config(stored)
    fn = make_denoiser_fn(model)
    seed = int(stored["seed"])
    if rcfg.mode == "none":
        flow = diffusion.sample(fn, pair, sched, rng_seed=seed)
    elif rcfg.mode == "coarse_to_fine":
        flow = refine_mod.coarse_to_fine(fn, pair, rcfg, sched, seed=seed)
    else:
        flow = refine_mod.warp_refine(fn, pair, rcfg, sched, seed=seed)
    h, w = orig
    flow = FlowField(flow.u[:h, :w], flow.v[:h, :w], flow.valid[:h, :w])

    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    flo_path = out_prefix.with_suffix(".flo")
    png_path = out_prefix.with_suffix(".png")
    write_flo(flow, flo_path)
    _save_png(viz.flow_to_color(flow) / 255.0, png_path, stored)
    report = {
        "flow": str(flo_path),
        "visualization": str(png_path),
        "config": stored,
        "config_hash": config_hash(stored),
    }
    if gt is not None:
        m = compute_metrics(flow, read_flo(gt))
        report["epe"] = m.epe
        report["fl_all"] = m.fl_all
        print(f"epe={m.epe:.4f} fl_all={m.fl_all:.2f}%")
    out_prefix.with_suffix(".json").write_text(json.dumps(report, indent=2))
    print(f"wrote {flo_path} and {png_path}")
    return report


def cmd_eval(cfg: dict, dataset_dir, checkpoint=None, oracle=False,
             zero_baseline=False, limit=None, out_file=None) -> dict:
    dataset = load_dataset_dir(dataset_dir, limit=limit)
    sched = make_schedule_from(cfg)
    rcfg = refine_config(cfg)
    refine_arg = None if rcfg.mode == "none" else rcfg
    seed = int(cfg["seed"])

    results = {}
    if zero_baseline:
        m = train_mod.zero_flow_metrics(dataset)
        results["zero_baseline"] = {"epe": m.epe, "fl_all": m.fl_all, "n": m.n_valid}
    if oracle:
        m = train_mod.evaluate_with(train_mod.oracle_denoiser_for, dataset, sched,
                                    refine_cfg=None, seed=seed)
        results["oracle"] = {"epe": m.epe, "fl_all": m.fl_all, "n": m.n_valid}
    if checkpoint is not None:
        model, _, _ = model_from_checkpoint(checkpoint)
        m = train_mod.evaluate(model, dataset, sched, refine_cfg=refine_arg, seed=seed)
        results["model"] = {"epe": m.epe, "fl_all": m.fl_all, "n": m.n_valid}
    if not results:
        raise ValueError("nothing to evaluate: pass a checkpoint, --oracle or --zero-baseline")

    report = {
        "dataset": str(dataset_dir),
        "n_images": len(dataset),
        "results": results,
        "config": cfg,
        "config_hash": config_hash(cfg),
    }
    for name, r in results.items():
        print(f"{name}: epe={r['epe']:.4f} fl_all={r['fl_all']:.2f}% (n={r['n']})")
    if out_file:
        Path(out_file).parent.mkdir(parents=True, exist_ok=True)
        Path(out_file).write_text(json.dumps(report, indent=2))
    return report


def cmd_viz(cfg: dict, flow_file, out_file) -> None:
    flow = read_flo(flow_file)
    _save_png(viz.flow_to_color(flow) / 255.0, out_file, cfg)
    print(f"wrote {out_file}")


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p):
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. --set train.lr=3e-4")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowdiff",
        description="Diffusion-based optical flow at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="materialize a toy dataset")
    _add_common(p)
    p.add_argument("-n", type=int, default=100, help="number of samples")
    p.add_argument("dataset_dir", help="output directory")

    p = sub.add_parser("train", help="train a denoiser")
    _add_common(p)
    p.add_argument("--use-correlation", action="store_true",
                   help="enable the correlation-volume variant")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    p = sub.add_parser("infer", help="estimate flow for one image pair")
    _add_common(p)
    p.add_argument("checkpoint")
    p.add_argument("image1")
    p.add_argument("image2")
    p.add_argument("-o", "--output", default="flow_out", help="output prefix")
    p.add_argument("--gt", default=None, help=".flo ground truth to score against")
    p.add_argument("--refine", choices=["none", "c2f", "warp"], default=None)
    p.add_argument("--T", type=int, default=None, help="refinement start step")
    p.add_argument("--raw-weights", action="store_true",
                   help="use raw instead of EMA weights")

    p = sub.add_parser("eval", help="evaluate on a materialized dataset")
    _add_common(p)
    p.add_argument("dataset_dir")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--oracle", action="store_true", help="perfect-denoiser test hook")
    p.add_argument("--zero-baseline", action="store_true",
                   help="score the all-zero predictor")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--refine", choices=["none", "c2f", "warp"], default=None)
    p.add_argument("--T", type=int, default=None)
    p.add_argument("--report", default=None, help="write the JSON report here")

    p = sub.add_parser("viz", help="render a .flo file to PNG")
    _add_common(p)
    p.add_argument("flow_file")
    p.add_argument("-o", "--output", default="flow_viz.png")
    return parser


_REFINE_ALIAS = {"none": "none", "c2f": "coarse_to_fine", "warp": "warp_refine"}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    sets = list(args.set)
    if getattr(args, "use_correlation", False):
        sets.append("model.use_correlation=true")
    if getattr(args, "refine", None) is not None:
        sets.append(f"refine.mode={_REFINE_ALIAS[args.refine]}")
    if getattr(args, "T", None) is not None:
        sets.append(f"refine.T={args.T}")
    try:
        cfg = resolve_config(args.config, sets, args.seed, args.out_dir)
        if args.command == "gen":
            cmd_gen(cfg, args.n, args.dataset_dir)
        elif args.command == "train":
            cmd_train(cfg, resume=args.resume)
        elif args.command == "infer":
            cmd_infer(cfg, args.checkpoint, args.image1, args.image2,
                      args.output, gt=args.gt, use_ema=not args.raw_weights)
        elif args.command == "eval":
            cmd_eval(cfg, args.dataset_dir, checkpoint=args.checkpoint,
                     oracle=args.oracle, zero_baseline=args.zero_baseline,
                     limit=args.limit, out_file=args.report)
        elif args.command == "viz":
            cmd_viz(cfg, args.flow_file, args.output)
    except (ValueError, FileNotFoundError, dataio.FlowFormatError,
            dataio.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
