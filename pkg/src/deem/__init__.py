"""Interleaved image-text modelling with a diffusion consistency loss on the image encoder."""

from .datamodel import DocumentError, ImageRecord, InterleavedDocument, SpecialTokens, TextSpan
from .diffusion import Denoiser, DiffusionCondition, NoiseSchedule, add_noise, guided_eps, reconstruct_partial, sample
from .model import DEEMModel, ModelConfig
from .sequence import PackedSequence, Tokenizer, assemble, filter_interleaved, pack
from .training import StageConfig, desk_stage, full_scale_stage, run_stage, stage_loss

__version__ = "0.1.0"
