"""Neural building blocks: embeddings, masked convolution with RGB channel
groups, causal 1D self-attention over pixels, and conditional gated layers.

Feature maps that carry per-pixel RGB structure are partitioned into three
equal channel groups. Mask kind "a" excludes the current pixel's own group
(first layer, reads strictly-past information only); kind "b" includes it
(later layers, so per-group state can propagate); kind "full" is unmasked.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor

EMBED_WIDTH = 8  # units per intensity / meta-position embedding
PIXEL_EMBED_WIDTH = 3 * EMBED_WIDTH


@dataclass(frozen=True)
class AttentionConfig:
    layers: int
    heads: int
    model_width: int
    head_width: int
    ffn_width: int
    mask_kind: str = "causal_shifted"  # or "none"

    def __post_init__(self):
        if self.heads * self.head_width != self.model_width:
            raise ValueError("heads * head_width must equal model_width")
        if self.mask_kind not in ("causal_shifted", "none"):
            raise ValueError(f"unknown mask_kind {self.mask_kind!r}")


@dataclass(frozen=True)
class PixelCNNConfig:
    layers: int
    conv_channels: int
    residual_channels: int
    filter_size: int = 3

    def __post_init__(self):
        if self.conv_channels % 3 or self.residual_channels % 3:
            raise ValueError("channel-group masking needs channel counts divisible by 3")
        if self.layers < 1:
            raise ValueError("need at least one gated layer")


def conv_mask(out_ch: int, in_ch: int, k: int, kind: str) -> np.ndarray:
    """Binary [O, C, k, k] mask enforcing raster order and RGB group order."""
    if kind == "full":
        return np.ones((out_ch, in_ch, k, k), dtype=np.float32)
    if kind not in ("a", "b"):
        raise ValueError(f"unknown mask kind {kind!r}")
    m = np.zeros((out_ch, in_ch, k, k), dtype=np.float32)
    c = k // 2
    m[:, :, :c, :] = 1  # rows above
    m[:, :, c, :c] = 1  # same row, left of center
    g_out = np.arange(out_ch) * 3 // out_ch
    g_in = np.arange(in_ch) * 3 // in_ch
    if kind == "a":
        allow = g_in[None, :] < g_out[:, None]
    else:
        allow = g_in[None, :] <= g_out[:, None]
    m[:, :, c, c] = allow.astype(np.float32)
    return m


class MaskedConv2d:
    def __init__(self, in_ch, out_ch, k, kind, rng, dtype=np.float32, init_scale=None):
        self.mask = conv_mask(out_ch, in_ch, k, kind)
        std = init_scale if init_scale is not None else np.sqrt(2.0 / (in_ch * k * k))
        self.w = Tensor(rng.standard_normal((out_ch, in_ch, k, k)) * std,
                        requires_grad=True, dtype=dtype)
        self.b = Tensor(np.zeros(out_ch), requires_grad=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.conv2d_masked(x, self.w, self.mask, self.b)

    def named_params(self, prefix):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class Linear:
    def __init__(self, din, dout, rng, dtype=np.float32, init_scale=None):
        std = init_scale if init_scale is not None else np.sqrt(1.0 / din)
        self.w = Tensor(rng.standard_normal((din, dout)) * std, requires_grad=True, dtype=dtype)
        self.b = Tensor(np.zeros(dout), requires_grad=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.linear(x, self.w, self.b)

    def named_params(self, prefix):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class Embedding:
    """Lookup table [V, E]; optionally a fixed one-hot identity (V == E)."""

    def __init__(self, vocab, width, rng, dtype=np.float32, one_hot=False):
        if one_hot:
            if vocab != width:
                raise ValueError("one-hot embedding needs vocab == width")
            self.table = Tensor(np.eye(vocab), requires_grad=False, dtype=dtype)
        else:
            self.table = Tensor(rng.standard_normal((vocab, width)) * 0.1,
                                requires_grad=True, dtype=dtype)

    def __call__(self, ids) -> Tensor:
        return ag.embed_lookup(self.table, ids)

    def named_params(self, prefix):
        if self.table.requires_grad:
            yield f"{prefix}.table", self.table


def pixel_embed(table: Embedding, values) -> Tensor:
    """Embed an integer [..., 3] pixel block to [..., 24] (8 units per channel,
    one table shared across R, G and B)."""
    values = np.asarray(values)
    e = table(values)  # [..., 3, 8]
    return ag.reshape(e, values.shape[:-1] + (PIXEL_EMBED_WIDTH,))


def meta_embed(table: Embedding, target_index, spatial) -> Tensor:
    """Tile the 8-unit meta-position row across [N, 8, H', W']."""
    idx = np.asarray(target_index)
    h, w = spatial
    e = table(idx)  # [N, 8]
    e = ag.reshape(e, (idx.shape[0], EMBED_WIDTH, 1, 1))
    return ag.expand(e, (idx.shape[0], EMBED_WIDTH, h, w))


class ResidualConvBlock:
    """x + conv3x3 -> relu -> conv3x3, unmasked, with a hidden width."""

    def __init__(self, channels, hidden, rng, dtype=np.float32):
        self.conv1 = MaskedConv2d(channels, hidden, 3, "full", rng, dtype)
        self.conv2 = MaskedConv2d(hidden, channels, 3, "full", rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.add(x, self.conv2(ag.relu(self.conv1(x))))

    def named_params(self, prefix):
        yield from self.conv1.named_params(f"{prefix}.conv1")
        yield from self.conv2.named_params(f"{prefix}.conv2")


class LayerNorm:
    def __init__(self, width, dtype=np.float32):
        self.gain = Tensor(np.ones(width), requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(width), requires_grad=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gain, self.bias)

    def named_params(self, prefix):
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.bias", self.bias


class AttentionLayer:
    def __init__(self, cfg: AttentionConfig, rng, dtype=np.float32):
        w = cfg.model_width
        self.cfg = cfg
        self.ln1 = LayerNorm(w, dtype)
        self.wq = Linear(w, w, rng, dtype)
        self.wk = Linear(w, w, rng, dtype)
        self.wv = Linear(w, w, rng, dtype)
        self.wo = Linear(w, w, rng, dtype)
        self.ln2 = LayerNorm(w, dtype)
        self.ffn1 = Linear(w, cfg.ffn_width, rng, dtype)
        self.ffn2 = Linear(cfg.ffn_width, w, rng, dtype)

    def __call__(self, x: Tensor, allowed: np.ndarray) -> Tensor:
        cfg = self.cfg
        n, t, w = x.shape
        h, hw = cfg.heads, cfg.head_width
        xn = self.ln1(x)

        def split_heads(z):
            return ag.transpose(ag.reshape(z, (n, t, h, hw)), (0, 2, 1, 3))

        q = split_heads(self.wq(xn))
        k = split_heads(self.wk(xn))
        v = split_heads(self.wv(xn))
        scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hw))
        probs = ag.masked_softmax(scores, allowed)
        ctx = ag.matmul(probs, v)  # [N, h, T, hw]
        ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (n, t, w))
        x = ag.add(x, self.wo(ctx))
        x = ag.add(x, self.ffn2(ag.relu(self.ffn1(self.ln2(x)))))
        return x

    def named_params(self, prefix):
        for name, sub in (("ln1", self.ln1), ("wq", self.wq), ("wk", self.wk),
                          ("wv", self.wv), ("wo", self.wo), ("ln2", self.ln2),
                          ("ffn1", self.ffn1), ("ffn2", self.ffn2)):
            yield from sub.named_params(f"{prefix}.{name}")


class AttentionStack:
    """Pre-norm multi-head self-attention over a fixed-length pixel sequence.

    With mask_kind "causal_shifted" a query never attends past its own
    position; the caller feeds input-shifted tokens so the diagonal is safe.
    A learned positional embedding is added at the input.
    """

    def __init__(self, cfg: AttentionConfig, seq_len, rng, dtype=np.float32):
        self.cfg = cfg
        self.seq_len = seq_len
        self.pos = Tensor(rng.standard_normal((seq_len, cfg.model_width)) * 0.02,
                          requires_grad=True, dtype=dtype)
        self.layers = [AttentionLayer(cfg, rng, dtype) for _ in range(cfg.layers)]
        if cfg.mask_kind == "causal_shifted":
            self.allowed = np.tril(np.ones((seq_len, seq_len), dtype=bool))
        else:
            self.allowed = np.ones((seq_len, seq_len), dtype=bool)

    def __call__(self, tokens: Tensor) -> Tensor:
        if tokens.ndim != 3 or tokens.shape[1] != self.seq_len:
            raise ValueError(f"expected [N, {self.seq_len}, {self.cfg.model_width}] tokens, got {tokens.shape}")
        x = ag.add(tokens, self.pos)
        for layer in self.layers:
            x = layer(x, self.allowed)
        return x

    def named_params(self, prefix):
        yield f"{prefix}.pos", self.pos
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(f"{prefix}.layer{i}")


class GatedPixelCNNLayer:
    """y = tanh(Wf * x + Vf . s) (x) sigmoid(Wg * x + Vg . s).

    Wf/Wg are raster+group masked convolutions over the modeled slice; the
    conditioning map enters through position-preserving 1x1 convolutions.
    """

    def __init__(self, in_ch, out_ch, cond_ch, k, kind, rng, dtype=np.float32):
        self.wf = MaskedConv2d(in_ch, out_ch, k, kind, rng, dtype)
        self.wg = MaskedConv2d(in_ch, out_ch, k, kind, rng, dtype)
        self.vf = MaskedConv2d(cond_ch, out_ch, 1, "full", rng, dtype)
        self.vg = MaskedConv2d(cond_ch, out_ch, 1, "full", rng, dtype)

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        if x.shape[2:] != cond.shape[2:]:
            raise ValueError(f"conditioning map {cond.shape} not aligned with input {x.shape}")
        f = ag.add(self.wf(x), self.vf(cond))
        g = ag.add(self.wg(x), self.vg(cond))
        return ag.mul(ag.tanh(f), ag.sigmoid(g))

    def named_params(self, prefix):
        for name, sub in (("wf", self.wf), ("wg", self.wg), ("vf", self.vf), ("vg", self.vg)):
            yield from sub.named_params(f"{prefix}.{name}")


class PixelCNNStack:
    """Gated masked-conv stack over an embedded target slice.

    The first layer is mask "a" (the current pixel's own group is invisible);
    later layers are mask "b" with group-masked 1x1 residual projections. The
    head is a group-masked 1x1 conv to 3*K logits, so logits for channel c
    depend only on channels before c within the pixel.
    """

    def __init__(self, cfg: PixelCNNConfig, in_ch, cond_ch, num_classes, rng, dtype=np.float32):
        self.cfg = cfg
        k = cfg.filter_size
        self.first = GatedPixelCNNLayer(in_ch, cfg.conv_channels, cond_ch, k, "a", rng, dtype)
        self.layers = []
        for _ in range(cfg.layers - 1):
            gated = GatedPixelCNNLayer(cfg.conv_channels, cfg.residual_channels, cond_ch, k, "b", rng, dtype)
            proj = MaskedConv2d(cfg.residual_channels, cfg.conv_channels, 1, "b", rng, dtype)
            self.layers.append((gated, proj))
        self.head = MaskedConv2d(cfg.conv_channels, 3 * num_classes, 1, "b", rng, dtype,
                                 init_scale=0.01)

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        h = self.first(x, cond)
        for gated, proj in self.layers:
            h = ag.add(h, proj(gated(h, cond)))
        return self.head(h)

    def named_params(self, prefix):
        yield from self.first.named_params(f"{prefix}.first")
        for i, (gated, proj) in enumerate(self.layers):
            yield from gated.named_params(f"{prefix}.layer{i}")
            yield from proj.named_params(f"{prefix}.layer{i}.proj")
        yield from self.head.named_params(f"{prefix}.head")


def masked_dependency_probe(logits_fn, slice_shape, num_values, base_values=None):
    """Dependency sets of every output logit on every input coordinate.

    Perturbs each (position, channel) of an integer slice through all its
    values and records which logits move at all; the model must be
    deterministic, so untouched logits compare bitwise equal. Returns a dict
    (h, w, c) -> set of (h', w', c') coordinates the logit depends on.
    """
    hs, ws = slice_shape
    if base_values is None:
        base_values = np.zeros((hs, ws, 3), dtype=np.int32)
    base = np.asarray(base_values, dtype=np.int32).copy()
    ref = np.asarray(logits_fn(base))  # [H, W, 3, K]
    deps = {(h, w, c): set() for h in range(hs) for w in range(ws) for c in range(3)}
    for h in range(hs):
        for w in range(ws):
            for c in range(3):
                orig = base[h, w, c]
                for v in range(num_values):
                    if v == orig:
                        continue
                    base[h, w, c] = v
                    out = np.asarray(logits_fn(base))
                    base[h, w, c] = orig
                    changed = np.any(out != ref, axis=-1)  # [H, W, 3]
                    for hh, ww, cc in np.argwhere(changed):
                        deps[(int(hh), int(ww), int(cc))].add((h, w, c))
    return deps


def strict_past(h, w, c, width):
    """Raster/channel predecessors of coordinate (h, w, c)."""
    past = set()
    for hh in range(h + 1):
        for ww in range(width if hh < h else w + 1):
            for cc in range(3):
                if (hh, ww) < (h, w) or ((hh, ww) == (h, w) and cc < c):
                    past.add((hh, ww, cc))
    return past
