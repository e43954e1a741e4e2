"""Bit-plane split/join for depth upscaling, plus display quantization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .subscale import Image


@dataclass(frozen=True)
class DepthStageSpec:
    """Two-stage bit split: d1 most significant bits, then d2 lower bits."""

    d1: int
    d2: int

    def __post_init__(self):
        if self.d1 < 1 or self.d2 < 0 or self.d1 + self.d2 > 8:
            raise ValueError(f"invalid bit split ({self.d1}, {self.d2})")

    @property
    def total(self) -> int:
        return self.d1 + self.d2


@dataclass(frozen=True)
class BitPlaneImage:
    msb: Image
    lsb: Image


def split_bits(image: Image, spec: DepthStageSpec) -> BitPlaneImage:
    """Split into the d1 top bits and the d2 remaining bits (lossless)."""
    if spec.total != image.depth:
        raise ValueError(f"split ({spec.d1},{spec.d2}) does not match image depth {image.depth}")
    v = image.values
    return BitPlaneImage(
        msb=Image(values=v >> spec.d2, depth=spec.d1),
        lsb=Image(values=v & ((1 << spec.d2) - 1), depth=spec.d2 if spec.d2 else 1),
    )


def join_bits(planes: BitPlaneImage, spec: DepthStageSpec) -> Image:
    """Recombine bit planes: value = msb * 2^d2 + lsb."""
    m, l = planes.msb.values, planes.lsb.values
    if m.shape != l.shape:
        raise ValueError("bit planes have mismatched shapes")
    if l.size and l.max() >= (1 << spec.d2):
        raise ValueError(f"lsb values overflow {spec.d2} bits")
    return Image(values=(m << spec.d2) + l, depth=spec.total)


def preview_quantize(image: Image, mode: str = "stretch") -> Image:
    """Render a low-depth image at 8 bits.

    "stretch" maps the value range onto [0, 255] with full contrast
    (round(v * 255 / (2^D - 1))); "shift" left-shifts to preserve bit
    alignment. Depth-8 input is returned unchanged.
    """
    d = image.depth
    if d == 8:
        return image
    if mode == "stretch":
        out = np.rint(image.values * (255.0 / ((1 << d) - 1))).astype(np.int32)
    elif mode == "shift":
        out = image.values << (8 - d)
    else:
        raise ValueError(f"unknown preview mode {mode!r}")
    return Image(values=out, depth=8)
