"""The subscale pixel network: context embedder plus hybrid slice decoder.

The embedder turns the padded slice tensor (plus meta-position embedding
and, when depth-upscaling, the conditioning image's slice tensor) into a
slice-sized feature map s. The decoder reads the target slice through a
shifted causal 1D attention stack, concatenates the result depth-wise with
s, and feeds both as conditioning into a gated masked-conv stack that emits
K logits per colour channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from . import blocks
from .autograd import Tensor
from .blocks import (EMBED_WIDTH, PIXEL_EMBED_WIDTH, AttentionConfig, AttentionStack,
                     Embedding, Linear, MaskedConv2d, PixelCNNConfig, PixelCNNStack,
                     ResidualConvBlock)
from .subscale import ContextWindow, SliceGrid, context_from_grid, meta_order, slot_layout

LN2 = float(np.log(2.0))


@dataclass(frozen=True)
class SPNConfig:
    scale: int
    slice_height: int
    slice_width: int
    depth: int  # bits modeled per channel; K = 2^depth classes
    cond_depth: int = 0  # bits of the conditioning image (depth upscaling), 0 = none
    embed_channels: int = 32
    embedder_conv_layers: int = 5
    context_width: int = 32
    embedder_attention: AttentionConfig = field(
        default_factory=lambda: AttentionConfig(1, 2, 32, 16, 64, "none"))
    decoder_attention: AttentionConfig = field(
        default_factory=lambda: AttentionConfig(2, 2, 32, 16, 64, "causal_shifted"))
    pixelcnn: PixelCNNConfig = field(default_factory=lambda: PixelCNNConfig(3, 24, 24))
    embedder_attention_first: bool = False
    one_hot_pixels: bool = False

    def __post_init__(self):
        if self.scale < 1:
            raise ValueError("scale must be >= 1")
        if not 1 <= self.depth <= 8 or self.cond_depth < 0 or self.cond_depth > 8:
            raise ValueError("bit depths must lie in [1, 8]")
        if self.embedder_conv_layers < 1 or self.embedder_conv_layers % 2 == 0:
            raise ValueError("embedder_conv_layers must be odd (conv-in plus residual pairs)")
        if self.embedder_attention.model_width != self.embed_channels:
            raise ValueError("embedder attention width must equal embed_channels")
        if self.embedder_attention.mask_kind != "none":
            raise ValueError("embedder attention must be unmasked")
        if self.decoder_attention.mask_kind != "causal_shifted":
            raise ValueError("decoder attention must be causal")
        if self.one_hot_pixels and (1 << self.depth) != EMBED_WIDTH:
            raise ValueError("one-hot pixel embedding requires 2^depth == 8")

    @property
    def num_classes(self) -> int:
        return 1 << self.depth

    @property
    def num_slots(self) -> int:
        return 2 * self.scale * (self.scale - 1)

    @property
    def seq_len(self) -> int:
        return self.slice_height * self.slice_width

    @property
    def image_height(self) -> int:
        return self.slice_height * self.scale

    @property
    def image_width(self) -> int:
        return self.slice_width * self.scale


@dataclass
class ContextBatch:
    """Stacked context windows for a batch of (image, target) pairs."""

    slot_values: np.ndarray  # [N, n_slots, H', W', 3] int32
    filled: np.ndarray  # [N, n_slots] float32 (1.0 = real slice, 0.0 = padding)
    target_index: np.ndarray  # [N] int64
    cond_values: np.ndarray | None = None  # [N, S*S, H', W', 3] int32


def stack_context_windows(windows, cond_values=None) -> ContextBatch:
    return ContextBatch(
        slot_values=np.stack([w.slot_values for w in windows]),
        filled=np.stack([w.filled for w in windows]).astype(np.float32),
        target_index=np.asarray([w.target_index for w in windows], dtype=np.int64),
        cond_values=cond_values,
    )


class ContextEmbedder:
    """Preceding-slice tensor (+ meta embedding, + conditioning slices) -> s."""

    def __init__(self, cfg: SPNConfig, pixel_table: Embedding, rng, dtype=np.float32):
        self.cfg = cfg
        self.pixel_table = pixel_table
        self.meta_table = Embedding(cfg.scale ** 2, EMBED_WIDTH, rng, dtype)
        self.cond_table = None
        in_ch = cfg.num_slots * PIXEL_EMBED_WIDTH + EMBED_WIDTH
        if cfg.cond_depth:
            self.cond_table = Embedding(1 << cfg.cond_depth, EMBED_WIDTH, rng, dtype)
            in_ch += cfg.scale ** 2 * PIXEL_EMBED_WIDTH
        self.conv_in = MaskedConv2d(in_ch, cfg.embed_channels, 3, "full", rng, dtype)
        n_blocks = (cfg.embedder_conv_layers - 1) // 2
        self.blocks = [ResidualConvBlock(cfg.embed_channels, cfg.embed_channels, rng, dtype)
                       for _ in range(n_blocks)]
        self.attention = AttentionStack(cfg.embedder_attention, cfg.seq_len, rng, dtype)
        self.out_proj = MaskedConv2d(cfg.embed_channels, cfg.context_width, 1, "full", rng, dtype)

    def _embed_slices(self, values, table, mask=None):
        # values [N, R, H, W, 3] -> [N, R*24, H, W], zeroing padding slots post-embed
        n, r, h, w, _ = values.shape
        e = blocks.pixel_embed(table, values)  # [N, R, H, W, 24]
        if mask is not None:
            e = ag.mul_const(e, mask[:, :, None, None, None])
        e = ag.transpose(e, (0, 1, 4, 2, 3))
        return ag.reshape(e, (n, r * PIXEL_EMBED_WIDTH, h, w))

    def _conv_part(self, x):
        for block in self.blocks:
            x = block(x)
        return x

    def _attn_part(self, x):
        n, c, h, w = x.shape
        tokens = ag.reshape(ag.transpose(x, (0, 2, 3, 1)), (n, h * w, c))
        tokens = self.attention(tokens)
        return ag.transpose(ag.reshape(tokens, (n, h, w, c)), (0, 3, 1, 2))

    def __call__(self, ctx: ContextBatch) -> Tensor:
        cfg = self.cfg
        n = ctx.slot_values.shape[0]
        h, w = cfg.slice_height, cfg.slice_width
        parts = []
        if cfg.num_slots:
            parts.append(self._embed_slices(ctx.slot_values, self.pixel_table, ctx.filled))
        if cfg.cond_depth:
            if ctx.cond_values is None:
                raise ValueError("depth-upscaling model requires conditioning slices")
            parts.append(self._embed_slices(ctx.cond_values, self.cond_table))
        elif ctx.cond_values is not None:
            raise ValueError("conditioning slices supplied to a model without cond_depth")
        parts.append(blocks.meta_embed(self.meta_table, ctx.target_index, (h, w)))
        x = ag.relu(self.conv_in(ag.concat(parts, axis=1) if len(parts) > 1 else parts[0]))
        if cfg.embedder_attention_first:
            x = self._conv_part(self._attn_part(x))
        else:
            x = self._attn_part(self._conv_part(x))
        return self.out_proj(x)

    def named_params(self, prefix):
        yield from self.meta_table.named_params(f"{prefix}.meta")
        if self.cond_table is not None:
            yield from self.cond_table.named_params(f"{prefix}.cond")
        yield from self.conv_in.named_params(f"{prefix}.conv_in")
        for i, block in enumerate(self.blocks):
            yield from block.named_params(f"{prefix}.block{i}")
        yield from self.attention.named_params(f"{prefix}.attn")
        yield from self.out_proj.named_params(f"{prefix}.out")


class SliceDecoder:
    """Causal attention over shifted target pixels, then a conditioned gated stack."""

    def __init__(self, cfg: SPNConfig, pixel_table: Embedding, rng, dtype=np.float32):
        self.cfg = cfg
        self.pixel_table = pixel_table
        att = cfg.decoder_attention
        self.in_proj = Linear(PIXEL_EMBED_WIDTH, att.model_width, rng, dtype)
        self.start = Tensor(rng.standard_normal(att.model_width) * 0.02,
                            requires_grad=True, dtype=dtype)
        self.attention = AttentionStack(att, cfg.seq_len, rng, dtype)
        cond_ch = att.model_width + cfg.context_width
        self.pixelcnn = PixelCNNStack(cfg.pixelcnn, PIXEL_EMBED_WIDTH, cond_ch,
                                      cfg.num_classes, rng, dtype)

    def __call__(self, targets, s: Tensor) -> Tensor:
        """targets [N, H', W', 3] ints, s [N, C_s, H', W'] -> logits [N, H', W', 3, K]."""
        cfg = self.cfg
        targets = np.asarray(targets)
        n, h, w, _ = targets.shape
        t = cfg.seq_len
        k = cfg.num_classes
        if (h, w) != (cfg.slice_height, cfg.slice_width):
            raise ValueError(f"target slice {targets.shape} does not match config")
        if s.shape != (n, cfg.context_width, h, w):
            raise ValueError(f"context map {s.shape} does not match config")

        e = blocks.pixel_embed(self.pixel_table, targets)  # [N, H, W, 24]
        tok = self.in_proj(ag.reshape(e, (n, t, PIXEL_EMBED_WIDTH)))
        start = ag.expand(ag.reshape(self.start, (1, 1, self.start.shape[0])), (n, 1, tok.shape[2]))
        shifted = ag.concat([start, ag.narrow(tok, 1, 0, t - 1)], axis=1)
        a = self.attention(shifted)
        a = ag.transpose(ag.reshape(a, (n, h, w, a.shape[2])), (0, 3, 1, 2))
        cond = ag.concat([a, s], axis=1)
        x = ag.transpose(e, (0, 3, 1, 2))  # [N, 24, H, W]
        logits = self.pixelcnn(x, cond)  # [N, 3K, H, W]
        return ag.transpose(ag.reshape(logits, (n, 3, k, h, w)), (0, 3, 4, 1, 2))

    def named_params(self, prefix):
        yield from self.in_proj.named_params(f"{prefix}.in_proj")
        yield f"{prefix}.start", self.start
        yield from self.attention.named_params(f"{prefix}.attn")
        yield from self.pixelcnn.named_params(f"{prefix}.pixelcnn")


def categorical_nll(logits, targets) -> np.ndarray:
    """Per-element NLL in nats, computed in float64 from the given logits.

    Metric bookkeeping runs at 64-bit so exact identities (uniform logits
    give exactly depth bits/dim; stage totals add up) hold to tight
    tolerances regardless of the 32-bit training dtype.
    """
    z = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    return lse - picked


class SPN:
    """Full subscale model: shared pixel table, context embedder, slice decoder."""

    kind = "spn"

    def __init__(self, cfg: SPNConfig, seed=0, dtype=np.float32, rng=None):
        self.cfg = cfg
        self.dtype = dtype
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.pixel_table = Embedding(cfg.num_classes, EMBED_WIDTH, rng, dtype,
                                     one_hot=cfg.one_hot_pixels)
        self.embedder = ContextEmbedder(cfg, self.pixel_table, rng, dtype)
        self.decoder = SliceDecoder(cfg, self.pixel_table, rng, dtype)

    def embed_context(self, ctx: ContextBatch) -> Tensor:
        return self.embedder(ctx)

    def slice_logits(self, targets, s: Tensor) -> Tensor:
        return self.decoder(targets, s)

    def parameters(self):
        params = list(self.pixel_table.named_params("pixel"))
        params += list(self.embedder.named_params("embedder"))
        params += list(self.decoder.named_params("decoder"))
        return params

    def num_params(self) -> int:
        return sum(p.size for _, p in self.parameters())


class DecoderOnly:
    """The hybrid decoder alone; the context map is a learned constant."""

    kind = "decoder_only"

    def __init__(self, cfg: SPNConfig, seed=0, dtype=np.float32, rng=None):
        self.cfg = cfg
        self.dtype = dtype
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.pixel_table = Embedding(cfg.num_classes, EMBED_WIDTH, rng, dtype,
                                     one_hot=cfg.one_hot_pixels)
        self.const_map = Tensor(rng.standard_normal(cfg.context_width) * 0.1,
                                requires_grad=True, dtype=dtype)
        self.decoder = SliceDecoder(cfg, self.pixel_table, rng, dtype)

    def context_map(self, n: int) -> Tensor:
        cfg = self.cfg
        c = ag.reshape(self.const_map, (1, cfg.context_width, 1, 1))
        return ag.expand(c, (n, cfg.context_width, cfg.slice_height, cfg.slice_width))

    def slice_logits(self, targets, s=None) -> Tensor:
        targets = np.asarray(targets)
        if s is None:
            s = self.context_map(targets.shape[0])
        return self.decoder(targets, s)

    def parameters(self):
        params = list(self.pixel_table.named_params("pixel"))
        params.append(("const_map", self.const_map))
        params += list(self.decoder.named_params("decoder"))
        return params

    def num_params(self) -> int:
        return sum(p.size for _, p in self.parameters())


def cond_slice_tensor(cond_image_values, s: int) -> np.ndarray:
    """All S*S slices of a conditioning image, stacked in meta order."""
    v = np.asarray(cond_image_values)
    return np.stack([v[i::s, j::s] for (i, j) in meta_order(s)])


def grid_context_batch(grids, metas, cond_images=None) -> ContextBatch:
    """Contexts for (grid, target) pairs, reading only slices before each target."""
    windows = [context_from_grid(g, m) for g, m in zip(grids, metas)]
    cond = None
    if cond_images is not None:
        s = grids[0].scale
        cond = np.stack([cond_slice_tensor(c.values, s) for c in cond_images])
    return stack_context_windows(windows, cond)


def slice_nll_terms(model: SPN, grid: SliceGrid, meta, cond_image=None) -> np.ndarray:
    """Float64 per-element NLL (nats) of one target slice given its context."""
    ctx = grid_context_batch([grid], [meta],
                             [cond_image] if cond_image is not None else None)
    with ag.no_grad():
        s = model.embed_context(ctx)
        logits = model.slice_logits(grid[meta][None], s)
    return categorical_nll(logits.data[0], grid[meta])


def image_nll_nats(model: SPN, image, cond_image=None) -> float:
    """Total NLL of a full image: sum of its slice NLLs in meta order."""
    from .subscale import deinterleave

    grid = deinterleave(image, model.cfg.scale)
    total = 0.0
    for meta in meta_order(model.cfg.scale):
        total += float(slice_nll_terms(model, grid, meta, cond_image).sum())
    return total
