"""Binary PPM (P6, maxval 255) reader and writer.

The one required image format: dependency-free and byte-exact. Low-depth
images are written through preview quantization with the convention recorded
in a header comment so they can be reconstructed.
"""

from __future__ import annotations

import numpy as np

from .bitdepth import preview_quantize
from .subscale import Image


def write_ppm(path, image: Image, convention: str = "stretch"):
    """Write an image as binary P6. Depth-8 images roundtrip bit-exactly;
    lower depths are quantized for display and tagged with a comment line."""
    out = preview_quantize(image, convention)
    h, w = out.height, out.width
    header = b"P6\n"
    if image.depth < 8:
        header += f"# depth={image.depth} convention={convention}\n".encode()
    header += f"{w} {h}\n255\n".encode()
    payload = out.values.astype(np.uint8).tobytes()
    with open(path, "wb") as fh:
        fh.write(header + payload)


def _read_tokens(data: bytes, count: int):
    """Pull whitespace-separated header tokens, skipping # comments."""
    tokens = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise ValueError("malformed PPM header (truncated)")
        ch = data[i:i + 1]
        if ch == b"#":
            nl = data.find(b"\n", i)
            if nl < 0:
                raise ValueError("malformed PPM header (unterminated comment)")
            i = nl + 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j:j + 1].isspace():
                j += 1
            tokens.append(data[i:j])
            i = j
    return tokens, i + 1  # single whitespace byte after maxval ends the header


def read_ppm(path) -> Image:
    """Read a binary P6 file into an 8-bit image."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary P6 PPM file")
    tokens, offset = _read_tokens(data[2:], 3)
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as e:
        raise ValueError(f"{path}: malformed PPM header") from e
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval} (only 8-bit depth supported)")
    payload = data[2 + offset:]
    need = w * h * 3
    if len(payload) < need:
        raise ValueError(f"{path}: truncated payload ({len(payload)} of {need} bytes)")
    values = np.frombuffer(payload[:need], dtype=np.uint8).reshape(h, w, 3)
    return Image(values=values.astype(np.int32), depth=8)
