"""Binary checkpoint container.

Layout: magic + version, a UTF-8 key=value metadata block (config echo,
step count, RNG state, determinism note), then named little-endian float32
blocks for parameters (declaration order), optimizer state and the Polyak
shadow. Save -> load -> save is byte-identical, and a config mismatch is
rejected from the metadata alone, before any model state is allocated.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from . import configio
from .model import SPN, DecoderOnly
from .training import RMSProp, TrainConfig

MAGIC = b"SPNCHKPT"
VERSION = 1

_KIND_PARAM = 0
_KIND_SQ = 1
_KIND_MOM = 2
_KIND_SHADOW = 3

_MODEL_CLASSES = {"spn": SPN, "decoder_only": DecoderOnly}


def _build_metadata(model, step, rng, train_cfg):
    lines = [f"format_version={VERSION}", f"kind={model.kind}", f"step={step}"]
    for key, value in configio.model_config_to_kv(model.cfg).items():
        lines.append(f"model.{key}={value}")
    if train_cfg is not None:
        for key, value in configio.train_config_to_kv(train_cfg).items():
            lines.append(f"train.{key}={value}")
    if rng is not None:
        lines.append("rng=" + json.dumps(rng.bit_generator.state, sort_keys=True))
    lines.append("note=bitwise reproducibility holds within one build; "
                 "payload is little-endian float32 in declaration order")
    lines.append(f"numpy_version={np.__version__}")
    return "\n".join(lines) + "\n"


def _write_block(fh, kind, name, arr):
    payload = np.ascontiguousarray(arr, dtype="<f4")
    name_b = name.encode()
    fh.write(struct.pack("<BH", kind, len(name_b)))
    fh.write(name_b)
    fh.write(struct.pack("<B", payload.ndim))
    fh.write(struct.pack(f"<{payload.ndim}I", *payload.shape))
    fh.write(payload.tobytes())


def save_checkpoint(path, model, opt: RMSProp | None = None, step: int = 0,
                    rng=None, train_cfg: TrainConfig | None = None):
    params = model.parameters()
    blocks = [(_KIND_PARAM, n, p.data) for n, p in params]
    if opt is not None:
        blocks += [(_KIND_SQ, n, opt.sq[n]) for n, _ in params]
        blocks += [(_KIND_MOM, n, opt.mom[n]) for n, _ in params]
        blocks += [(_KIND_SHADOW, n, opt.shadow[n]) for n, _ in params]
    meta = _build_metadata(model, step, rng, train_cfg).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(blocks)))
        for kind, name, arr in blocks:
            _write_block(fh, kind, name, arr)


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.path = path
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ValueError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _parse_metadata(meta_text, path):
    meta = {}
    for line in meta_text.splitlines():
        if not line:
            continue
        key, value = line.split("=", 1)
        meta[key] = value
    if int(meta.get("format_version", -1)) != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
    return meta


def load_checkpoint(path, expected_config=None):
    """Restore a model (and optimizer state, RNG, step) from a checkpoint.

    When expected_config is given, a mismatch with the stored config echo is
    rejected before any model state is allocated. Returns a dict with keys
    model, opt, step, rng, train_cfg, kind.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = r.unpack("<I")
    meta = _parse_metadata(r.take(meta_len).decode(), path)

    model_kv = {k[len("model."):]: v for k, v in meta.items() if k.startswith("model.")}
    cfg = configio.model_config_from_kv(model_kv)
    if expected_config is not None and cfg != expected_config:
        raise ValueError(f"{path}: checkpoint config does not match the requested config")
    kind = meta.get("kind", "spn")
    if kind not in _MODEL_CLASSES:
        raise ValueError(f"{path}: unknown model kind {kind!r}")

    train_kv = {k[len("train."):]: v for k, v in meta.items() if k.startswith("train.")}
    train_cfg = configio.train_config_from_kv(train_kv) if train_kv else None

    model = _MODEL_CLASSES[kind](cfg, seed=0)
    params = model.parameters()
    by_name = dict(params)
    opt = RMSProp(params, train_cfg) if train_cfg is not None else None

    (n_blocks,) = r.unpack("<I")
    expected_order = [(_KIND_PARAM, n) for n, _ in params]
    has_opt_blocks = opt is not None and n_blocks == 4 * len(params)
    if has_opt_blocks:
        expected_order += [(_KIND_SQ, n) for n, _ in params]
        expected_order += [(_KIND_MOM, n) for n, _ in params]
        expected_order += [(_KIND_SHADOW, n) for n, _ in params]
    if n_blocks != len(expected_order):
        raise ValueError(f"{path}: expected {len(expected_order)} blocks, found {n_blocks}")

    for kind_want, name_want in expected_order:
        kind_got, name_len = r.unpack("<BH")
        name = r.take(name_len).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        arr = np.frombuffer(r.take(4 * int(np.prod(shape, dtype=np.int64))), dtype="<f4")
        arr = arr.reshape(shape).astype(np.float32)
        if (kind_got, name) != (kind_want, name_want):
            raise ValueError(f"{path}: unexpected block {name!r} (kind {kind_got})")
        if shape != by_name[name].shape:
            raise ValueError(f"{path}: block {name!r} has shape {shape}, expected {by_name[name].shape}")
        if kind_got == _KIND_PARAM:
            by_name[name].data = arr.copy()
        elif kind_got == _KIND_SQ:
            opt.sq[name] = arr.copy()
        elif kind_got == _KIND_MOM:
            opt.mom[name] = arr.copy()
        else:
            opt.shadow[name] = arr.copy()

    if opt is not None and not has_opt_blocks:
        # checkpoint carried no optimizer state: start it fresh at the loaded params
        for name, p in params:
            opt.sq[name] = np.zeros(p.shape, dtype=p.dtype)
            opt.mom[name] = np.zeros(p.shape, dtype=p.dtype)
            opt.shadow[name] = p.data.copy()

    rng = None
    if "rng" in meta:
        rng = np.random.default_rng(0)
        rng.bit_generator.state = json.loads(meta["rng"])

    return {
        "model": model,
        "opt": opt,
        "step": int(meta.get("step", 0)),
        "rng": rng,
        "train_cfg": train_cfg,
        "kind": kind,
    }
