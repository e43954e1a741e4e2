"""MLE training with Monte Carlo slice sampling, RMSProp and Polyak averaging,
plus exact bits/dim evaluation over the full subscale decomposition.

The training loss that drives gradients is the 32-bit graph mean; every
reported number (train metric, evaluation, staged totals) is recomputed in
float64 from the same logits, so the estimator-consistency and bookkeeping
identities hold to tight tolerances.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .bitdepth import DepthStageSpec, split_bits
from .model import LN2, SPN, categorical_nll, grid_context_batch
from .subscale import deinterleave, meta_order


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-4
    lr_drops: tuple = ((50_000, 3e-5), (100_000, 1e-5))  # piecewise-constant schedule
    rmsprop_momentum: float = 0.9
    rmsprop_decay: float = 0.95
    rmsprop_epsilon: float = 1e-8
    polyak_decay: float = 0.9999
    clip_norm: float | None = 1.0
    seed: int = 0
    steps: int = 1000
    report_every: int = 50
    checkpoint_every: int = 0  # 0 = only at the end
    decoder_slices: str = "first"  # decoder-only training data: "first" or "all" positions

    def __post_init__(self):
        if self.learning_rate <= 0 and self.learning_rate != 0.0:
            raise ValueError("learning rate must be >= 0")
        if not 0.0 < self.polyak_decay < 1.0:
            raise ValueError("polyak decay must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")

    def lr_at(self, step: int) -> float:
        lr = self.learning_rate
        for threshold, value in self.lr_drops:
            if step >= threshold:
                lr = value
        return lr


class RMSProp:
    """RMSProp with momentum plus a Polyak (EMA) shadow of the parameters.

    sq   <- decay * sq + (1 - decay) * g^2
    mom  <- momentum * mom + lr * g / sqrt(sq + eps)
    p    <- p - mom
    shadow <- polyak * shadow + (1 - polyak) * p     (after every step)
    """

    def __init__(self, params, cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.sq = {n: np.zeros(p.shape, dtype=p.dtype) for n, p in self.params}
        self.mom = {n: np.zeros(p.shape, dtype=p.dtype) for n, p in self.params}
        self.shadow = {n: p.data.copy() for n, p in self.params}

    def step(self, lr: float):
        c = self.cfg
        lr = float(lr)
        for name, p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros(p.shape, dtype=p.dtype)
            sq = self.sq[name]
            sq *= c.rmsprop_decay
            sq += (1.0 - c.rmsprop_decay) * (g * g)
            mom = self.mom[name]
            mom *= c.rmsprop_momentum
            mom += lr * g / np.sqrt(sq + c.rmsprop_epsilon)
            p.data -= mom
            shadow = self.shadow[name]
            shadow *= c.polyak_decay
            shadow += (1.0 - c.polyak_decay) * p.data


def clip_gradients(params, max_norm: float | None) -> float:
    """Scale all gradients so their global norm is at most max_norm."""
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if max_norm is not None and norm > max_norm > 0:
        factor = np.float32(max_norm / norm)
        for _, p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


@contextlib.contextmanager
def shadow_params(opt: RMSProp | None, enabled: bool = True):
    """Temporarily swap model parameters for their Polyak shadows."""
    if opt is None or not enabled:
        yield
        return
    for name, p in opt.params:
        p.data, opt.shadow[name] = opt.shadow[name], p.data
    try:
        yield
    finally:
        for name, p in opt.params:
            p.data, opt.shadow[name] = opt.shadow[name], p.data


def prepare_images(cfg, images):
    """Split dataset images into (target, conditioning) per the model's depths."""
    if cfg.cond_depth:
        spec = DepthStageSpec(cfg.cond_depth, cfg.depth)
        planes = [split_bits(img, spec) for img in images]
        return [p.lsb for p in planes], [p.msb for p in planes]
    for img in images:
        if img.depth != cfg.depth:
            raise ValueError(f"image depth {img.depth} does not match model depth {cfg.depth}")
    return list(images), None


def batch_slice_loss(model, images, metas, cond_images=None):
    """Forward one (image, target-slice) batch.

    Returns (graph_loss, nats_f64, n_elements): the 32-bit mean cross-entropy
    tensor for backprop, and the float64 total NLL of the same predictions.
    A decoder-only model sees the target slices without any context.
    """
    s_factor = model.cfg.scale
    grids = [deinterleave(img, s_factor) for img in images]
    targets = np.stack([g[m] for g, m in zip(grids, metas)])
    if model.kind == "decoder_only":
        logits = model.slice_logits(targets)
    else:
        ctx = grid_context_batch(grids, metas, cond_images)
        logits = model.slice_logits(targets, model.embed_context(ctx))
    per_elem = ag.softmax_cross_entropy(logits, targets)
    nats = float(categorical_nll(logits.data, targets).sum())
    return per_elem.mean(), nats, per_elem.size


def train_step(model, opt: RMSProp, images, step: int, cfg: TrainConfig, rng,
               force_all_slices: bool = False):
    """One update: per image draw one target slice uniformly (or enumerate all
    S^2 slices in forced mode), backprop the mean slice NLL, apply RMSProp and
    update the Polyak shadow. Returns the float64 bits/dim of the sampled slices."""
    order = meta_order(model.cfg.scale)
    targets_imgs, cond_imgs = prepare_images(model.cfg, images)
    first_only = model.kind == "decoder_only" and cfg.decoder_slices == "first"
    if force_all_slices:
        batch_imgs = [img for img in targets_imgs for _ in order]
        metas = [m for _ in targets_imgs for m in order]
        batch_cond = None if cond_imgs is None else [c for c in cond_imgs for _ in order]
    elif first_only:
        batch_imgs = targets_imgs
        metas = [(0, 0)] * len(targets_imgs)
        batch_cond = cond_imgs
    else:
        picks = rng.integers(0, len(order), size=len(targets_imgs))
        batch_imgs = targets_imgs
        metas = [order[i] for i in picks]
        batch_cond = cond_imgs

    try:
        loss, nats, count = batch_slice_loss(model, batch_imgs, metas, batch_cond)
        params = opt.params
        ag.zero_grads(params)
        ag.backward(loss)
    except FloatingPointError as e:
        raise RuntimeError(f"training diverged at step {step}: {e}") from e
    if not np.isfinite(loss.data):
        raise RuntimeError(f"training diverged at step {step}: non-finite loss")
    grad_norm = clip_gradients(params, cfg.clip_norm)
    opt.step(cfg.lr_at(step))
    return {
        "step": step,
        "bits_per_dim": nats / (count * LN2),
        "lr": cfg.lr_at(step),
        "grad_norm": grad_norm,
    }


def dataset_nll_nats(model, images, batch_size: int = 64) -> float:
    """Exact float64 NLL total over every slice of every image."""
    targets_imgs, cond_imgs = prepare_images(model.cfg, images)
    s_factor = model.cfg.scale
    grids = [deinterleave(img, s_factor) for img in targets_imgs]
    total = 0.0
    with ag.no_grad():
        for meta in meta_order(s_factor):
            for lo in range(0, len(grids), batch_size):
                chunk = grids[lo:lo + batch_size]
                targets = np.stack([g[meta] for g in chunk])
                if model.kind == "decoder_only":
                    logits = model.slice_logits(targets)
                else:
                    cond = None if cond_imgs is None else cond_imgs[lo:lo + batch_size]
                    ctx = grid_context_batch(chunk, [meta] * len(chunk), cond)
                    logits = model.slice_logits(targets, model.embed_context(ctx))
                total += float(categorical_nll(logits.data, targets).sum())
    return total


def evaluate_bits_per_dim(model, images, opt: RMSProp | None = None,
                          use_shadow: bool = True, batch_size: int = 64) -> float:
    """Average bits/dim over the dataset, by default with Polyak-averaged weights."""
    if not images:
        raise ValueError("cannot evaluate on an empty dataset")
    cfg = model.cfg
    dims = cfg.image_height * cfg.image_width * 3
    with shadow_params(opt, use_shadow):
        nats = dataset_nll_nats(model, images, batch_size)
    return nats / (len(images) * dims * LN2)


def evaluate_staged(images, stage1: SPN, stage2: SPN, spec: DepthStageSpec,
                    opts=(None, None), use_shadow: bool = True, batch_size: int = 64):
    """Stage NLLs of the depth-upscaling pipeline, each normalized by the full
    H*W*3 dimension count; returns (total, stage1_bits, stage2_bits) with
    total = stage1 + stage2."""
    if stage1.cfg.depth != spec.d1 or stage1.cfg.cond_depth != 0:
        raise ValueError("stage-1 model does not match the depth split")
    if stage2.cfg.depth != spec.d2 or stage2.cfg.cond_depth != spec.d1:
        raise ValueError("stage-2 model does not match the depth split")
    planes = [split_bits(img, spec) for img in images]
    msb = [p.msb for p in planes]
    cfg = stage1.cfg
    dims = cfg.image_height * cfg.image_width * 3
    with shadow_params(opts[0], use_shadow):
        nats1 = dataset_nll_nats(stage1, msb, batch_size)
    with shadow_params(opts[1], use_shadow):
        nats2 = dataset_nll_nats(stage2, images, batch_size)
    bits1 = nats1 / (len(images) * dims * LN2)
    bits2 = nats2 / (len(images) * dims * LN2)
    return bits1 + bits2, bits1, bits2


def format_staged(total: float, stage1: float, stage2: float) -> str:
    """Render staged results the way result tables quote them: total (s1, s2)."""
    return f"{total:.4f} ({stage1:.4f}, {stage2:.4f})"


def train_loop(model, opt: RMSProp, images, cfg: TrainConfig, *,
               rng=None, start_step: int = 0, log_file=None, stop_fn=None,
               checkpoint_fn=None):
    """Run train steps, appending "step=<n> bits_per_dim=<f> wall_s=<f>" report
    lines. `stop_fn(step, metrics)` may end the run early; `checkpoint_fn(step)`
    is called every cfg.checkpoint_every steps and at the end."""
    if not images:
        raise ValueError("cannot train on an empty dataset")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    t0 = time.perf_counter()
    history = []

    def report(metrics):
        line = (f"step={metrics['step']} bits_per_dim={metrics['bits_per_dim']:.6f} "
                f"wall_s={time.perf_counter() - t0:.3f}")
        history.append((metrics["step"], metrics["bits_per_dim"]))
        if log_file is not None:
            log_file.write(line + "\n")
            log_file.flush()

    step = start_step
    for step in range(start_step, cfg.steps):
        indices = rng.integers(0, len(images), size=cfg.batch_size)
        batch = [images[i] for i in indices]
        metrics = train_step(model, opt, batch, step, cfg, rng)
        if (step + 1) % cfg.report_every == 0 or step + 1 == cfg.steps:
            report(metrics)
        if checkpoint_fn is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            checkpoint_fn(step + 1)
        if stop_fn is not None and stop_fn(step, metrics):
            break
    if checkpoint_fn is not None:
        checkpoint_fn(step + 1)
    return history
