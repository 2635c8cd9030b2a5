"""Distributed 3D rotary embeddings and autoregressive discrete diffusion forcing on toy token videos."""

from .errors import TokvidError
from .rope import RopeConfig, RopeVariant, build_frequency_table, apply_rotary, assign_positions
from .sequence import SequenceLayout, encode_sequence, decode_layout, validate_sequence
from .masking import build_temporal_causal_mask, sample_tube_mask
from .model import ModelConfig, ToyDecoder, init_params, forward, save_checkpoint, load_checkpoint
from .ardf import SamplerConfig, TrainConfig, train_step, fit, generate_video

__version__ = "0.1.0"
