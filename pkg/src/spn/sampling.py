"""Ancestral sampling: single slices, full subscale images, and the size /
depth / multidimensional upscaling pipelines.

All randomness flows through one seedable generator, consumed strictly in
generation order (one uniform draw per categorical step), so a sampled
prefix is independent of randomness consumed later. Temperatures divide the
logits at sampling time; greedy mode takes the argmax and consumes no
randomness.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .bitdepth import BitPlaneImage, DepthStageSpec, join_bits
from .model import SPN, grid_context_batch, stack_context_windows, cond_slice_tensor
from .subscale import Image, SliceGrid, assemble_context, interleave, meta_order

DEFAULT_STAGE_TEMPERATURES = (0.99, 1.0)  # low-depth / initial stage, then the rest


def draw_categorical(logits, temperature: float, rng, greedy: bool = False) -> int:
    """One categorical draw from tempered logits (inverse-CDF on one uniform)."""
    logits = np.asarray(logits, dtype=np.float64)
    if greedy:
        return int(np.argmax(logits))
    if temperature <= 0:
        raise ValueError("temperature must be positive (use greedy mode for the limit)")
    z = logits / temperature
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(p), u, side="right"))
    return min(idx, len(p) - 1)


def categorical_entropy(logits, temperature: float) -> float:
    """Entropy (nats) of softmax(logits / temperature)."""
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum())


def sample_slice(model, s, temperature: float, rng, greedy: bool = False,
                 step_log=None) -> np.ndarray:
    """Raster/channel-order ancestral sampling of one slice.

    Each drawn value is written back before the next step so the following
    conditionals see it. `s` is the context feature map (None for a
    decoder-only model). Raw logits of every step are appended to step_log
    when given.
    """
    cfg = model.cfg
    h, w = cfg.slice_height, cfg.slice_width
    values = np.zeros((h, w, 3), dtype=np.int32)
    with ag.no_grad():
        for y in range(h):
            for x in range(w):
                for c in range(3):
                    logits = model.slice_logits(values[None], s).data[0, y, x, c]
                    if step_log is not None:
                        step_log.append(logits.astype(np.float64))
                    values[y, x, c] = draw_categorical(logits, temperature, rng, greedy)
    return values


def sample_image(spn: SPN, temperature: float, rng, *, greedy: bool = False,
                 cond_image: Image | None = None, initial_slices=None,
                 step_log=None) -> Image:
    """Full subscale generation: iterate meta order, conditioning each slice on
    the already-sampled ones; slices in `initial_slices` are injected verbatim."""
    cfg = spn.cfg
    s_factor = cfg.scale
    done = {m: np.asarray(v, dtype=np.int32) for m, v in (initial_slices or {}).items()}
    cond_batch = None
    if cond_image is not None:
        if not cfg.cond_depth:
            raise ValueError("model does not take a conditioning image")
        cond_batch = cond_slice_tensor(cond_image.values, s_factor)[None]
    elif cfg.cond_depth:
        raise ValueError("depth-upscaling model requires a conditioning image")

    with ag.no_grad():
        for meta in meta_order(s_factor):
            if meta in done:
                continue
            window = assemble_context({m: v for m, v in done.items() if m < meta},
                                      meta, s_factor,
                                      slice_shape=(cfg.slice_height, cfg.slice_width))
            ctx = stack_context_windows([window], cond_batch)
            s = spn.embed_context(ctx)
            done[meta] = sample_slice(spn, s, temperature, rng, greedy, step_log)

    slices = np.empty((s_factor, s_factor, cfg.slice_height, cfg.slice_width, 3), dtype=np.int32)
    for (i, j), v in done.items():
        slices[i, j] = v
    return interleave(SliceGrid(scale=s_factor, depth=cfg.depth, slices=slices))


def _stage_temps(temperatures, n: int):
    temps = list(temperatures) if temperatures is not None else []
    while len(temps) < n:
        temps.append(DEFAULT_STAGE_TEMPERATURES[1] if temps else DEFAULT_STAGE_TEMPERATURES[0])
    return temps[:n]


def sample_size_upscaled(first_model, spn: SPN, temperatures=None, rng=None, *,
                         greedy: bool = False, first_slice=None, step_log=None) -> Image:
    """Draw slice (0, 0) from a standalone slice decoder (or inject one), then
    let the subscale model generate the remaining S^2 - 1 slices."""
    if (first_model.cfg.slice_height, first_model.cfg.slice_width) != \
            (spn.cfg.slice_height, spn.cfg.slice_width):
        raise ValueError("first-slice model and subscale model have different slice sizes")
    if first_model.cfg.depth != spn.cfg.depth:
        raise ValueError("first-slice model and subscale model have different depths")
    t_first, t_rest = _stage_temps(temperatures, 2)
    if first_slice is None:
        first_slice = sample_slice(first_model, None, t_first, rng, greedy, step_log)
    return sample_image(spn, t_rest, rng, greedy=greedy,
                        initial_slices={(0, 0): first_slice}, step_log=step_log)


def sample_depth_upscaled(stage1: SPN, stage2: SPN, spec: DepthStageSpec,
                          temperatures=None, rng=None, *, greedy: bool = False,
                          stage1_image: Image | None = None, first_slice_model=None,
                          step_log=None) -> Image:
    """Sample the d1 most significant bits with stage 1 (optionally size-upscaled
    from a first-slice decoder), then the remaining d2 bits conditioned on them."""
    if stage1.cfg.depth != spec.d1 or stage1.cfg.cond_depth != 0:
        raise ValueError("stage-1 model does not match the depth split")
    if stage2.cfg.depth != spec.d2 or stage2.cfg.cond_depth != spec.d1:
        raise ValueError("stage-2 model does not match the depth split")
    if (stage1.cfg.image_height, stage1.cfg.image_width) != \
            (stage2.cfg.image_height, stage2.cfg.image_width):
        raise ValueError("stage models generate different image sizes")
    t1, t2 = _stage_temps(temperatures, 2)
    msb = stage1_image
    if msb is None:
        if first_slice_model is not None:
            msb = sample_size_upscaled(first_slice_model, stage1, [t1, t1], rng,
                                       greedy=greedy, step_log=step_log)
        else:
            msb = sample_image(stage1, t1, rng, greedy=greedy, step_log=step_log)
    lsb = sample_image(stage2, t2, rng, greedy=greedy, cond_image=msb, step_log=step_log)
    return join_bits(BitPlaneImage(msb=msb, lsb=lsb), spec)


def sample_multidimensional(first_model, stage1: SPN, stage2: SPN, spec: DepthStageSpec,
                            temperatures=None, rng=None, *, greedy: bool = False,
                            step_log=None) -> Image:
    """Size upscaling of the low-depth image followed by depth upscaling."""
    t_first, t1_rest, t2 = _stage_temps(temperatures, 3)
    msb = sample_size_upscaled(first_model, stage1, [t_first, t1_rest], rng,
                               greedy=greedy, step_log=step_log)
    return sample_depth_upscaled(stage1, stage2, spec, [t1_rest, t2], rng,
                                 greedy=greedy, stage1_image=msb, step_log=step_log)
