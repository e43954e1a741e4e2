import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from spn.blocks import AttentionConfig, PixelCNNConfig
from spn.model import SPNConfig


def tiny_spn_config(scale=2, slice_hw=4, depth=2, cond_depth=0, width=12, **kw):
    """Small-but-complete config used across the test suite."""
    defaults = dict(
        scale=scale,
        slice_height=slice_hw,
        slice_width=slice_hw,
        depth=depth,
        cond_depth=cond_depth,
        embed_channels=width,
        embedder_conv_layers=3,
        context_width=width,
        embedder_attention=AttentionConfig(1, 2, width, width // 2, 2 * width, "none"),
        decoder_attention=AttentionConfig(1, 2, width, width // 2, 2 * width, "causal_shifted"),
        pixelcnn=PixelCNNConfig(2, width, width),
    )
    defaults.update(kw)
    return SPNConfig(**defaults)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
