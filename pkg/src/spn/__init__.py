"""Subscale pixel network: autoregressive image modeling over interleaved
slices, with size and depth upscaling."""

from .bitdepth import BitPlaneImage, DepthStageSpec, join_bits, preview_quantize, split_bits
from .blocks import AttentionConfig, PixelCNNConfig
from .model import SPN, DecoderOnly, SPNConfig
from .sampling import (sample_depth_upscaled, sample_image, sample_multidimensional,
                       sample_size_upscaled, sample_slice)
from .subscale import (ContextWindow, Image, SliceGrid, assemble_context, context_from_grid,
                       deinterleave, interleave, meta_order, slot_layout)
from .training import (RMSProp, TrainConfig, evaluate_bits_per_dim, evaluate_staged,
                       train_loop, train_step)

__version__ = "0.1.0"
