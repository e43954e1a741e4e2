"""Flat key=value serialization for model and training configs.

Used both by the CLI config files and by the checkpoint metadata echo.
Unknown keys are rejected loudly so a misspelled hyperparameter can never
silently fall back to a default.
"""

from __future__ import annotations

from .blocks import AttentionConfig, PixelCNNConfig
from .model import SPNConfig
from .training import TrainConfig

_MODEL_INT_KEYS = (
    "scale", "slice_height", "slice_width", "depth", "cond_depth",
    "embed_channels", "embedder_conv_layers", "context_width",
    "embedder_attention_layers", "embedder_attention_heads",
    "embedder_attention_head_width", "embedder_attention_ffn_width",
    "decoder_attention_layers", "decoder_attention_heads",
    "decoder_attention_head_width", "decoder_attention_ffn_width",
    "pixelcnn_layers", "pixelcnn_conv_channels", "pixelcnn_residual_channels",
    "pixelcnn_filter_size",
)
_MODEL_BOOL_KEYS = ("embedder_attention_first", "one_hot_pixels")
MODEL_KEYS = _MODEL_INT_KEYS + _MODEL_BOOL_KEYS

_TRAIN_INT_KEYS = ("batch_size", "seed", "steps", "report_every", "checkpoint_every")
_TRAIN_FLOAT_KEYS = ("learning_rate", "rmsprop_momentum", "rmsprop_decay",
                     "rmsprop_epsilon", "polyak_decay")
TRAIN_KEYS = _TRAIN_INT_KEYS + _TRAIN_FLOAT_KEYS + ("lr_drops", "clip_norm", "decoder_slices")


def _parse_bool(value: str) -> bool:
    if value in ("true", "1", "yes"):
        return True
    if value in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def model_config_to_kv(cfg: SPNConfig) -> dict:
    ea, da = cfg.embedder_attention, cfg.decoder_attention
    return {
        "scale": str(cfg.scale),
        "slice_height": str(cfg.slice_height),
        "slice_width": str(cfg.slice_width),
        "depth": str(cfg.depth),
        "cond_depth": str(cfg.cond_depth),
        "embed_channels": str(cfg.embed_channels),
        "embedder_conv_layers": str(cfg.embedder_conv_layers),
        "context_width": str(cfg.context_width),
        "embedder_attention_layers": str(ea.layers),
        "embedder_attention_heads": str(ea.heads),
        "embedder_attention_head_width": str(ea.head_width),
        "embedder_attention_ffn_width": str(ea.ffn_width),
        "decoder_attention_layers": str(da.layers),
        "decoder_attention_heads": str(da.heads),
        "decoder_attention_head_width": str(da.head_width),
        "decoder_attention_ffn_width": str(da.ffn_width),
        "pixelcnn_layers": str(cfg.pixelcnn.layers),
        "pixelcnn_conv_channels": str(cfg.pixelcnn.conv_channels),
        "pixelcnn_residual_channels": str(cfg.pixelcnn.residual_channels),
        "pixelcnn_filter_size": str(cfg.pixelcnn.filter_size),
        "embedder_attention_first": "true" if cfg.embedder_attention_first else "false",
        "one_hot_pixels": "true" if cfg.one_hot_pixels else "false",
    }


def model_config_from_kv(kv: dict) -> SPNConfig:
    unknown = set(kv) - set(MODEL_KEYS)
    if unknown:
        raise ValueError(f"unknown model config keys: {sorted(unknown)}")
    missing = set(MODEL_KEYS) - set(kv)
    if missing:
        raise ValueError(f"missing model config keys: {sorted(missing)}")
    v = {k: int(kv[k]) for k in _MODEL_INT_KEYS}
    b = {k: _parse_bool(kv[k]) for k in _MODEL_BOOL_KEYS}
    embedder_attention = AttentionConfig(
        v["embedder_attention_layers"], v["embedder_attention_heads"],
        v["embedder_attention_heads"] * v["embedder_attention_head_width"],
        v["embedder_attention_head_width"], v["embedder_attention_ffn_width"], "none")
    decoder_attention = AttentionConfig(
        v["decoder_attention_layers"], v["decoder_attention_heads"],
        v["decoder_attention_heads"] * v["decoder_attention_head_width"],
        v["decoder_attention_head_width"], v["decoder_attention_ffn_width"], "causal_shifted")
    pixelcnn = PixelCNNConfig(v["pixelcnn_layers"], v["pixelcnn_conv_channels"],
                              v["pixelcnn_residual_channels"], v["pixelcnn_filter_size"])
    return SPNConfig(
        scale=v["scale"], slice_height=v["slice_height"], slice_width=v["slice_width"],
        depth=v["depth"], cond_depth=v["cond_depth"], embed_channels=v["embed_channels"],
        embedder_conv_layers=v["embedder_conv_layers"], context_width=v["context_width"],
        embedder_attention=embedder_attention, decoder_attention=decoder_attention,
        pixelcnn=pixelcnn, embedder_attention_first=b["embedder_attention_first"],
        one_hot_pixels=b["one_hot_pixels"])


def train_config_to_kv(cfg: TrainConfig) -> dict:
    return {
        "batch_size": str(cfg.batch_size),
        "learning_rate": repr(cfg.learning_rate),
        "lr_drops": ",".join(f"{s}:{repr(v)}" for s, v in cfg.lr_drops) or "none",
        "rmsprop_momentum": repr(cfg.rmsprop_momentum),
        "rmsprop_decay": repr(cfg.rmsprop_decay),
        "rmsprop_epsilon": repr(cfg.rmsprop_epsilon),
        "polyak_decay": repr(cfg.polyak_decay),
        "clip_norm": "none" if cfg.clip_norm is None else repr(cfg.clip_norm),
        "seed": str(cfg.seed),
        "steps": str(cfg.steps),
        "report_every": str(cfg.report_every),
        "checkpoint_every": str(cfg.checkpoint_every),
        "decoder_slices": cfg.decoder_slices,
    }


def train_config_from_kv(kv: dict) -> TrainConfig:
    unknown = set(kv) - set(TRAIN_KEYS)
    if unknown:
        raise ValueError(f"unknown training config keys: {sorted(unknown)}")
    args = {}
    for k in _TRAIN_INT_KEYS:
        if k in kv:
            args[k] = int(kv[k])
    for k in _TRAIN_FLOAT_KEYS:
        if k in kv:
            args[k] = float(kv[k])
    if "lr_drops" in kv:
        if kv["lr_drops"] == "none":
            args["lr_drops"] = ()
        else:
            drops = []
            for part in kv["lr_drops"].split(","):
                step, value = part.split(":")
                drops.append((int(step), float(value)))
            args["lr_drops"] = tuple(drops)
    if "clip_norm" in kv:
        args["clip_norm"] = None if kv["clip_norm"] == "none" else float(kv["clip_norm"])
    if "decoder_slices" in kv:
        if kv["decoder_slices"] not in ("first", "all"):
            raise ValueError(f"decoder_slices must be 'first' or 'all', got {kv['decoder_slices']!r}")
        args["decoder_slices"] = kv["decoder_slices"]
    return TrainConfig(**args)


def parse_kv_text(text: str) -> dict:
    """Parse flat `key=value` lines; blank lines and # comments are skipped."""
    kv = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if key in kv:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        kv[key] = value
    return kv


def render_kv(kv: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in kv.items())
