"""Command-line surface: train / eval / sample / upscale-size / upscale-depth /
slice / verify.

Configs are flat key=value text (model plus training keys in one file);
unknown keys fail loudly. Every run logs its seed and the sha256 of the
canonical config so artifacts are reproducible from their log header.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys

import numpy as np

from . import configio
from .bitdepth import DepthStageSpec
from .checkpoint import load_checkpoint, save_checkpoint
from .data import load_images, load_manifest
from .model import SPN, DecoderOnly
from .ppm import read_ppm, write_ppm
from .sampling import sample_depth_upscaled, sample_image, sample_multidimensional, \
    sample_size_upscaled, sample_slice
from .subscale import Image, deinterleave, meta_order
from .training import (RMSProp, TrainConfig, evaluate_bits_per_dim, evaluate_staged,
                       format_staged, shadow_params, train_loop)


def _split_config(kv: dict):
    model_kv = {k: v for k, v in kv.items() if k in configio.MODEL_KEYS}
    kind = kv.pop("kind", "spn")
    if kind not in ("spn", "decoder_only"):
        raise ValueError(f"unknown model kind {kind!r}")
    train_kv = {k: v for k, v in kv.items() if k not in configio.MODEL_KEYS}
    return configio.model_config_from_kv(model_kv), configio.train_config_from_kv(train_kv), kind


def _load_config_file(path):
    with open(path) as fh:
        kv = configio.parse_kv_text(fh.read())
    return kv


def _config_hash(kv: dict) -> str:
    canon = "".join(f"{k}={v}\n" for k, v in sorted(kv.items()))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _apply_overrides(train_cfg: TrainConfig, args) -> TrainConfig:
    from dataclasses import replace
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        updates["steps"] = args.steps
    return replace(train_cfg, **updates) if updates else train_cfg


def _restore_for_inference(path, use_shadow=True):
    restored = load_checkpoint(path)
    return restored["model"], (restored["opt"] if use_shadow else None)


def cmd_train(args):
    kv = _load_config_file(args.config)
    cfg_hash = _config_hash(kv)
    model_cfg, train_cfg, kind = _split_config(kv)
    train_cfg = _apply_overrides(train_cfg, args)

    manifest = load_manifest(args.data)
    images = load_images(manifest, split="train")

    start_step = 0
    if args.checkpoint:
        restored = load_checkpoint(args.checkpoint, expected_config=model_cfg)
        model, opt = restored["model"], restored["opt"]
        if opt is None:
            opt = RMSProp(model.parameters(), train_cfg)
        start_step = restored["step"]
        rng = restored["rng"] or np.random.default_rng(train_cfg.seed)
    else:
        model_cls = SPN if kind == "spn" else DecoderOnly
        model = model_cls(model_cfg, seed=train_cfg.seed)
        opt = RMSProp(model.parameters(), train_cfg)
        rng = np.random.default_rng(train_cfg.seed)

    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "metrics.log")

    def checkpoint_fn(step):
        save_checkpoint(os.path.join(args.out, f"ckpt_{step:08d}.ckpt"),
                        model, opt, step=step, rng=rng, train_cfg=train_cfg)

    with open(log_path, "a") as log:
        log.write(f"# seed={train_cfg.seed} config_hash={cfg_hash}\n")
        print(f"training {kind} for {train_cfg.steps} steps "
              f"(seed={train_cfg.seed} config_hash={cfg_hash})", file=sys.stderr)
        train_loop(model, opt, images, train_cfg, rng=rng, start_step=start_step,
                   log_file=log, checkpoint_fn=checkpoint_fn)
    return 0


def cmd_eval(args):
    use_shadow = not args.no_shadow
    model, opt = _restore_for_inference(args.checkpoint, use_shadow)
    manifest = load_manifest(args.data)
    images = load_images(manifest, split=args.split)
    if args.stage2_checkpoint:
        stage2, opt2 = _restore_for_inference(args.stage2_checkpoint, use_shadow)
        spec = DepthStageSpec(model.cfg.depth, stage2.cfg.depth)
        total, s1, s2 = evaluate_staged(images, model, stage2, spec,
                                        opts=(opt, opt2), use_shadow=use_shadow)
        print(format_staged(total, s1, s2))
    else:
        bits = evaluate_bits_per_dim(model, images, opt, use_shadow=use_shadow)
        print(f"{bits:.4f}")
    return 0


def _out_paths(out, count):
    if count == 1:
        return [out]
    root, ext = os.path.splitext(out)
    return [f"{root}_{i:03d}{ext or '.ppm'}" for i in range(count)]


def cmd_sample(args):
    use_shadow = not args.no_shadow
    model, opt = _restore_for_inference(args.checkpoint, use_shadow)
    rng = np.random.default_rng(args.seed or 0)
    temp = args.temperature[0] if args.temperature else 1.0
    with shadow_params(opt, use_shadow):
        for path in _out_paths(args.out, args.count):
            if model.kind == "decoder_only":
                values = sample_slice(model, None, temp, rng, greedy=args.greedy)
                img = Image(values=values, depth=model.cfg.depth)
            else:
                img = sample_image(model, temp, rng, greedy=args.greedy)
            write_ppm(path, img)
            print(path)
    return 0


def cmd_upscale_size(args):
    use_shadow = not args.no_shadow
    first, opt_f = _restore_for_inference(args.first_checkpoint, use_shadow)
    spn, opt_s = _restore_for_inference(args.checkpoint, use_shadow)
    if first.kind != "decoder_only":
        raise ValueError("--first-checkpoint must hold a decoder-only model")
    rng = np.random.default_rng(args.seed or 0)
    with shadow_params(opt_f, use_shadow), shadow_params(opt_s, use_shadow):
        img = sample_size_upscaled(first, spn, args.temperature, rng, greedy=args.greedy)
    write_ppm(args.out, img)
    print(args.out)
    return 0


def cmd_upscale_depth(args):
    use_shadow = not args.no_shadow
    stage1, opt1 = _restore_for_inference(args.stage1_checkpoint, use_shadow)
    stage2, opt2 = _restore_for_inference(args.stage2_checkpoint, use_shadow)
    spec = DepthStageSpec(stage1.cfg.depth, stage2.cfg.depth)
    rng = np.random.default_rng(args.seed or 0)
    first = opt_first = None
    if args.first_checkpoint:
        first, opt_first = _restore_for_inference(args.first_checkpoint, use_shadow)
    with shadow_params(opt1, use_shadow), shadow_params(opt2, use_shadow), \
            shadow_params(opt_first, use_shadow):
        if first is not None:
            img = sample_multidimensional(first, stage1, stage2, spec, args.temperature,
                                          rng, greedy=args.greedy)
        else:
            img = sample_depth_upscaled(stage1, stage2, spec, args.temperature, rng,
                                        greedy=args.greedy)
    write_ppm(args.out, img)
    print(args.out)
    return 0


def cmd_slice(args):
    img = read_ppm(args.input)
    if args.depth < 8:
        img = Image(values=img.values >> (8 - args.depth), depth=args.depth)
    grid = deinterleave(img, args.scale)
    os.makedirs(args.out, exist_ok=True)
    for i, j in meta_order(args.scale):
        path = os.path.join(args.out, f"slice_{i}_{j}.ppm")
        write_ppm(path, Image(values=grid[(i, j)], depth=img.depth))
        print(path)
    return 0


def cmd_verify(args):
    from .verify import run_verification
    ok = run_verification(out=sys.stdout)
    return 0 if ok else 1


def build_parser():
    parser = argparse.ArgumentParser(prog="spn", description="subscale pixel network toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=True):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--temperature", type=float, action="append", default=None,
                       help="sampling temperature; repeat once per stage")
        p.add_argument("--greedy", action="store_true")
        p.add_argument("--no-shadow", action="store_true",
                       help="use raw weights instead of the Polyak average")
        if checkpoint:
            p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("train", help="train a model from a key=value config")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="dataset manifest path")
    p.add_argument("--out", required=True, help="output directory (checkpoints, metrics.log)")
    p.add_argument("--checkpoint", default=None, help="resume from this checkpoint")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="bits/dim on a dataset split")
    common(p)
    p.add_argument("--stage2-checkpoint", default=None,
                   help="evaluate a two-stage depth-upscaling pipeline")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "valid"), default="valid")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sample", help="draw images from a trained model")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("upscale-size", help="first-slice decoder + subscale completion")
    common(p)
    p.add_argument("--first-checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_upscale_size)

    p = sub.add_parser("upscale-depth", help="stage-1 bits then conditioned stage-2 bits")
    common(p, checkpoint=False)
    p.add_argument("--stage1-checkpoint", required=True)
    p.add_argument("--stage2-checkpoint", required=True)
    p.add_argument("--first-checkpoint", default=None,
                   help="optional first-slice model for full multidimensional upscaling")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_upscale_depth)

    p = sub.add_parser("slice", help="write the S*S subscale slices of an image")
    p.add_argument("--input", required=True)
    p.add_argument("--scale", "--S", dest="scale", type=int, required=True)
    p.add_argument("--depth", type=int, default=8)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_slice)

    p = sub.add_parser("verify", help="run the invariant suite")
    p.set_defaults(fn=cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
