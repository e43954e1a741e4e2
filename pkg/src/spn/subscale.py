"""Subscale ordering: slice extraction, meta-position order, context assembly.

An image is cut into S*S interleaved slices; slice (i, j) holds every S-th
pixel starting at row offset i and column offset j (0-based). Slices are
generated in raster order over (i, j), and the context for a target slice
is the fixed layout of preceding slices at relative offsets, padded with
empty slots so every target sees the same tensor shape.

Meta-positions are plain (i, j) tuples; Python's tuple ordering is exactly
the required raster order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Image:
    """Integer HxWx3 image at a declared bit depth (values in [0, 2^depth))."""

    values: np.ndarray
    depth: int

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or v.shape[2] != 3:
            raise ValueError(f"image values must be HxWx3, got {v.shape}")
        if not np.issubdtype(v.dtype, np.integer):
            raise ValueError("image values must be integers")
        if not 1 <= self.depth <= 8:
            raise ValueError(f"depth must be in [1, 8], got {self.depth}")
        if v.size and (v.min() < 0 or v.max() >= (1 << self.depth)):
            raise ValueError(f"values out of range for depth {self.depth}")
        object.__setattr__(self, "values", np.ascontiguousarray(v, dtype=np.int32))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class SliceGrid:
    """The S*S slices of an image, indexed by meta-position (i, j)."""

    scale: int
    depth: int
    slices: np.ndarray  # [S, S, H/S, W/S, 3] int32

    def __getitem__(self, meta):
        i, j = meta
        return self.slices[i, j]

    @property
    def slice_height(self) -> int:
        return self.slices.shape[2]

    @property
    def slice_width(self) -> int:
        return self.slices.shape[3]


def meta_order(s: int):
    """All meta-positions in generation (raster) order."""
    if s < 1:
        raise ValueError("scaling factor must be >= 1")
    return [(i, j) for i in range(s) for j in range(s)]


def meta_index(meta, s: int) -> int:
    return meta[0] * s + meta[1]


def deinterleave(image: Image, s: int) -> SliceGrid:
    """Split an image into its S*S interleaved slices (lossless)."""
    h, w = image.height, image.width
    if s < 1 or h % s or w % s:
        raise ValueError(f"scale {s} must divide image dims {h}x{w}")
    slices = np.empty((s, s, h // s, w // s, 3), dtype=np.int32)
    for i in range(s):
        for j in range(s):
            slices[i, j] = image.values[i::s, j::s]
    return SliceGrid(scale=s, depth=image.depth, slices=slices)


def interleave(grid: SliceGrid) -> Image:
    """Exact inverse of deinterleave."""
    s = grid.scale
    hs, ws = grid.slice_height, grid.slice_width
    out = np.empty((hs * s, ws * s, 3), dtype=np.int32)
    for i in range(s):
        for j in range(s):
            out[i::s, j::s] = grid.slices[i, j]
    return Image(values=out, depth=grid.depth)


def slot_layout(s: int):
    """The 2S(S-1) relative offsets that can precede a target, in raster order.

    Offsets run over di in [-(S-1), 0], dj in [-(S-1), S-1], keeping those
    that precede (0, 0) in meta order. The slot index of a given offset is
    the same for every target (equivariance).
    """
    if s < 1:
        raise ValueError("scaling factor must be >= 1")
    offsets = []
    for di in range(-(s - 1), 1):
        for dj in range(-(s - 1), s):
            if (di, dj) < (0, 0):
                offsets.append((di, dj))
    return offsets


@dataclass(frozen=True)
class ContextWindow:
    """Fixed-layout context for one target slice.

    slot_values holds one sub-image per relative offset of slot_layout(S);
    unfilled (out-of-grid) slots hold zeros and are marked in `filled`.
    Padding is resolved downstream in embedded space, so a zero pixel value
    never aliases with an empty slot.
    """

    scale: int
    target: tuple
    slot_values: np.ndarray  # [n_slots, H', W', 3] int32
    filled: np.ndarray  # [n_slots] bool
    offsets: list = field(repr=False)

    @property
    def target_index(self) -> int:
        return meta_index(self.target, self.scale)

    @property
    def assembled(self) -> np.ndarray:
        """Depth-wise concatenation of the slots in slot order ([H', W', 3*n_slots])."""
        n, h, w, _ = self.slot_values.shape
        return np.ascontiguousarray(self.slot_values.transpose(1, 2, 0, 3).reshape(h, w, 3 * n))


def _preceding(target, s: int):
    return [m for m in meta_order(s) if m < target]


def assemble_context(slices: dict, target, s: int, slice_shape=None) -> ContextWindow:
    """Build the context window from exactly the slices preceding `target`.

    `slices` maps meta-position -> [H', W', 3] int array. Supplying a slice
    at or after the target is a leakage error; missing a preceding slice is
    an error too.
    """
    if not (0 <= target[0] < s and 0 <= target[1] < s):
        raise ValueError(f"target {target} outside {s}x{s} meta grid")
    need = set(_preceding(target, s))
    have = set(slices.keys())
    extra = have - need
    if extra:
        raise ValueError(f"context contains non-preceding slices (leakage): {sorted(extra)}")
    missing = need - have
    if missing:
        raise ValueError(f"context is missing preceding slices: {sorted(missing)}")

    if need:
        any_slice = next(iter(slices.values()))
        hs, ws = any_slice.shape[0], any_slice.shape[1]
    elif slice_shape is not None:
        hs, ws = slice_shape
    else:
        raise ValueError("slice_shape required for a context with no preceding slices")

    offsets = slot_layout(s)
    slot_values = np.zeros((len(offsets), hs, ws, 3), dtype=np.int32)
    filled = np.zeros(len(offsets), dtype=bool)
    ti, tj = target
    for r, (di, dj) in enumerate(offsets):
        mi, mj = ti + di, tj + dj
        if 0 <= mi < s and 0 <= mj < s:
            slot_values[r] = slices[(mi, mj)]
            filled[r] = True
    return ContextWindow(scale=s, target=target, slot_values=slot_values,
                         filled=filled, offsets=offsets)


def context_from_grid(grid: SliceGrid, target) -> ContextWindow:
    """Assemble a target's context from a full grid, reading only preceding slices."""
    sub = {m: grid.slices[m[0], m[1]] for m in _preceding(target, grid.scale)}
    return assemble_context(sub, target, grid.scale,
                            slice_shape=(grid.slice_height, grid.slice_width))
