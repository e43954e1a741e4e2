"""Invariant suite behind the `verify` subcommand: bijections, causality
probes, masking contracts and gradient checks on a fresh build."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .bitdepth import DepthStageSpec, join_bits, split_bits
from .blocks import (AttentionConfig, AttentionStack, GatedPixelCNNLayer, PixelCNNConfig,
                     masked_dependency_probe, strict_past)
from .gradcheck import check_gradients
from .model import SPN, DecoderOnly, SPNConfig, image_nll_nats, LN2
from .subscale import Image, deinterleave, interleave, meta_order, slot_layout
from .training import evaluate_bits_per_dim


def _tiny_config(depth=2, slice_hw=3, width=6):
    return SPNConfig(
        scale=2, slice_height=slice_hw, slice_width=slice_hw, depth=depth,
        embed_channels=width, embedder_conv_layers=3, context_width=width,
        embedder_attention=AttentionConfig(1, 1, width, width, 2 * width, "none"),
        decoder_attention=AttentionConfig(1, 1, width, width, 2 * width, "causal_shifted"),
        pixelcnn=PixelCNNConfig(2, width, width))


def check_bijection(rng):
    for s in (1, 2, 4):
        for _ in range(50):
            img = Image(values=rng.integers(0, 256, size=(8, 8, 3)), depth=8)
            if not np.array_equal(interleave(deinterleave(img, s)).values, img.values):
                return False, f"roundtrip failed at S={s}"
    return True, "interleave(deinterleave(x)) == x for S in {1,2,4}"


def check_slot_layout(rng):
    for s in (1, 2, 3, 4, 8):
        layout = slot_layout(s)
        if len(layout) != 2 * s * (s - 1):
            return False, f"slot count wrong for S={s}"
        if any(off >= (0, 0) for off in layout):
            return False, f"non-preceding offset in layout for S={s}"
    return True, "slot layouts have 2S(S-1) strictly-preceding offsets"


def check_bit_roundtrip(rng):
    spec = DepthStageSpec(3, 5)
    values = np.arange(256, dtype=np.int32)
    img = Image(values=np.stack([values] * 3, -1).reshape(16, 16, 3), depth=8)
    ok = np.array_equal(join_bits(split_bits(img, spec), spec).values, img.values)
    return ok, "split/join lossless over all 8-bit values"


def check_masked_grad_support(rng):
    x = Tensor(rng.standard_normal((2, 3, 4, 4)).astype(np.float32))
    w = Tensor(rng.standard_normal((6, 3, 3, 3)).astype(np.float32), requires_grad=True)
    mask = (rng.random((6, 3, 3, 3)) < 0.5).astype(np.float32)
    out = ag.conv2d_masked(x, w, mask, Tensor(np.zeros(6)))
    ag.backward(out.sum())
    ok = np.all(w.grad[mask == 0] == 0.0)
    return ok, "masked conv weight gradient support is inside the mask"


def check_attention_causality(rng):
    cfg = AttentionConfig(2, 2, 8, 4, 16, "causal_shifted")
    stack = AttentionStack(cfg, 5, rng)
    tokens = rng.standard_normal((1, 5, 8)).astype(np.float32)
    base = stack(Tensor(tokens)).data
    for t in range(4):
        mutated = tokens.copy()
        mutated[0, t + 1:] += 1.0
        out = stack(Tensor(mutated)).data
        if not np.array_equal(out[0, :t + 1], base[0, :t + 1]):
            return False, f"output at {t} changed with future tokens"
    return True, "attention outputs are bitwise invariant to future tokens"


def check_decoder_causality(rng):
    model = DecoderOnly(_tiny_config(depth=1), seed=7)

    def logits_fn(values):
        with ag.no_grad():
            return model.slice_logits(values[None]).data[0]

    deps = masked_dependency_probe(logits_fn, (3, 3), 2)
    for (h, w, c), dep in deps.items():
        if not dep <= strict_past(h, w, c, 3):
            return False, f"logit ({h},{w},{c}) depends outside its past"
    return True, "decoder dependency sets lie in the strict raster/channel past"


def check_uniform_bits(rng):
    model = SPN(_tiny_config(depth=3, width=6), seed=0)
    model.decoder.pixelcnn.head.w.data[:] = 0
    model.decoder.pixelcnn.head.b.data[:] = 0
    images = [Image(values=rng.integers(0, 8, size=(6, 6, 3)), depth=3) for _ in range(2)]
    bits = evaluate_bits_per_dim(model, images, use_shadow=False)
    return abs(bits - 3.0) <= 1e-9, f"zero head gives {bits:.12f} bits/dim at depth 3"


def check_gated_layer_gradient(rng):
    layer = GatedPixelCNNLayer(3, 3, 3, 3, "a", rng, dtype=np.float64)
    x = Tensor(rng.standard_normal((1, 3, 3, 3)), requires_grad=True, dtype=np.float64)
    cond = Tensor(rng.standard_normal((1, 3, 3, 3)), requires_grad=True, dtype=np.float64)
    params = [x, cond] + [p for _, p in layer.named_params("g")]
    err = check_gradients(lambda: layer(x, cond).sum(), params, h=1e-4)
    return err < 1e-5, f"gated layer FD max relative error {err:.2e}"


def check_leakage(rng):
    model = SPN(_tiny_config(depth=2), seed=3)
    img = Image(values=rng.integers(0, 4, size=(6, 6, 3)), depth=2)
    base = image_nll_nats(model, img)
    from .model import slice_nll_terms
    grid = deinterleave(img, 2)
    terms = {m: slice_nll_terms(model, grid, m) for m in meta_order(2)}
    poisoned = deinterleave(img, 2)
    poisoned.slices[1, 1] = (poisoned.slices[1, 1] + 1) % 4
    for m in meta_order(2)[:-1]:
        if not np.array_equal(slice_nll_terms(model, poisoned, m), terms[m]):
            return False, f"slice {m} NLL changed when a later slice changed"
    return True, "earlier slice NLLs are bitwise invariant to later slices"


CHECKS = [
    ("subscale_bijection", check_bijection),
    ("slot_layout", check_slot_layout),
    ("bit_roundtrip", check_bit_roundtrip),
    ("masked_grad_support", check_masked_grad_support),
    ("attention_causality", check_attention_causality),
    ("decoder_causality", check_decoder_causality),
    ("uniform_bits", check_uniform_bits),
    ("gated_layer_gradient", check_gated_layer_gradient),
    ("leakage_guard", check_leakage),
]


def run_verification(out=None):
    """Run every invariant check; returns True when all pass."""
    rng = np.random.default_rng(0)
    all_ok = True
    for name, fn in CHECKS:
        ok, detail = fn(rng)
        all_ok = all_ok and ok
        if out is not None:
            out.write(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}\n")
    return all_ok
