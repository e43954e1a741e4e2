"""Dataset manifests and deterministic synthetic corpora.

Manifests are flat text: declared geometry plus one `train=` / `valid=`
line per PPM file. Images load at 8 bits and are reduced to the declared
depth by keeping the D most significant bits. The synthetic kinds carry
cross-slice structure on purpose, so subscale context is informative.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .ppm import read_ppm, write_ppm
from .subscale import Image


@dataclass(frozen=True)
class DatasetManifest:
    root: str
    height: int
    width: int
    depth: int
    train_files: tuple
    valid_files: tuple


def save_manifest(path, manifest: DatasetManifest):
    lines = [
        f"height={manifest.height}",
        f"width={manifest.width}",
        f"depth={manifest.depth}",
    ]
    lines += [f"train={f}" for f in manifest.train_files]
    lines += [f"valid={f}" for f in manifest.valid_files]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_manifest(path) -> DatasetManifest:
    root = os.path.dirname(os.path.abspath(path))
    geometry = {}
    train, valid = [], []
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, value = line.split("=", 1)
            if key == "train":
                train.append(value)
            elif key == "valid":
                valid.append(value)
            elif key in ("height", "width", "depth"):
                geometry[key] = int(value)
            else:
                raise ValueError(f"{path}: unknown manifest key {key!r}")
    for key in ("height", "width", "depth"):
        if key not in geometry:
            raise ValueError(f"{path}: manifest is missing {key}")
    return DatasetManifest(root=root, train_files=tuple(train), valid_files=tuple(valid),
                           **geometry)


def load_images(manifest: DatasetManifest, split: str = "train"):
    """Decode a split's PPM files, check geometry, and keep the top D bits."""
    files = manifest.train_files if split == "train" else manifest.valid_files
    images = []
    for rel in files:
        img = read_ppm(os.path.join(manifest.root, rel))
        if (img.height, img.width) != (manifest.height, manifest.width):
            raise ValueError(f"{rel}: geometry {img.height}x{img.width} does not match "
                             f"declared {manifest.height}x{manifest.width}")
        if manifest.depth < 8:
            img = Image(values=img.values >> (8 - manifest.depth), depth=manifest.depth)
        images.append(img)
    return images


def _stripes(rng, h, w, depth):
    """Vertical colour bars: every row identical, so one row determines the image."""
    hi = 1 << depth
    n_colors = int(rng.integers(2, 5))
    palette = rng.integers(0, hi, size=(n_colors, 3))
    thickness = int(rng.integers(1, 4))
    phase = int(rng.integers(0, n_colors * thickness))
    cols = palette[((np.arange(w) + phase) // thickness) % n_colors]
    return np.broadcast_to(cols[None, :, :], (h, w, 3)).copy()


def _gradients(rng, h, w, depth):
    hi = (1 << depth) - 1
    out = np.zeros((h, w, 3), dtype=np.int64)
    yy, xx = np.mgrid[0:h, 0:w]
    for c in range(3):
        a, b = rng.uniform(-1, 1, size=2)
        ramp = a * yy / h + b * xx / w
        lo, span = ramp.min(), max(ramp.max() - ramp.min(), 1e-9)
        out[:, :, c] = np.rint((ramp - lo) / span * hi)
    return out


def _checker(rng, h, w, depth):
    hi = 1 << depth
    cell = int(rng.integers(1, 5))
    c0, c1 = rng.integers(0, hi, size=(2, 3))
    yy, xx = np.mgrid[0:h, 0:w]
    parity = ((yy // cell) + (xx // cell)) % 2
    return np.where(parity[:, :, None] == 0, c0[None, None], c1[None, None])


def _blobs(rng, h, w, depth):
    hi = 1 << depth
    out = np.broadcast_to(rng.integers(0, hi, size=3)[None, None], (h, w, 3)).copy()
    for _ in range(int(rng.integers(2, 5))):
        y0, x0 = int(rng.integers(0, h)), int(rng.integers(0, w))
        y1 = int(rng.integers(y0 + 1, h + 1))
        x1 = int(rng.integers(x0 + 1, w + 1))
        out[y0:y1, x0:x1] = rng.integers(0, hi, size=3)
    return out


_KINDS = {"stripes": _stripes, "gradients": _gradients, "checker": _checker, "blobs": _blobs}


def synthesize_image(kind: str, rng, h: int, w: int, depth: int) -> Image:
    if kind not in _KINDS:
        raise ValueError(f"unknown corpus kind {kind!r} (have {sorted(_KINDS)})")
    return Image(values=_KINDS[kind](rng, h, w, depth).astype(np.int32), depth=depth)


def make_synthetic_corpus(kind: str, count: int, h: int, w: int, depth: int, seed: int,
                          out_dir: str, valid_every: int = 8) -> DatasetManifest:
    """Write `count` deterministic images as PPM plus a manifest.

    Every valid_every-th image is tagged as the validation split. Fixed seed
    gives identical corpus bytes.
    """
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    train, valid = [], []
    for i in range(count):
        img = synthesize_image(kind, rng, h, w, depth)
        rel = f"{kind}_{i:05d}.ppm"
        write_ppm(os.path.join(out_dir, rel), img)
        (valid if valid_every and (i + 1) % valid_every == 0 else train).append(rel)
    manifest = DatasetManifest(root=os.path.abspath(out_dir), height=h, width=w, depth=depth,
                               train_files=tuple(train), valid_files=tuple(valid))
    save_manifest(os.path.join(out_dir, "manifest.txt"), manifest)
    return manifest
