"""Zero-shot text-guided editing for latent diffusion music models."""

__version__ = "0.1.0"

from .condition import (
    CaptionBank,
    EditDirection,
    PromptEmbedding,
    ToyTextEncoder,
    apply_edit,
    compute_delta,
    direction_for_keywords,
    embed_prompt,
    synthesize_captions,
)
from .denoiser import Denoiser, DenoiserConfig, predict_noise, train_toy_denoiser
from .editor import EditRequest, EditResult, attention_loss, constrained_edit_step, edit, reconstruct_and_record
from .errors import DeltaEditError
from .inversion import InversionConfig, edit_real, invert
from .metrics import chroma_similarity, chromagram, evaluate_batch
from .schedule import LatentClip, NoiseSchedule, build_schedule, ddim_invert_step, ddim_step

__all__ = [
    "CaptionBank",
    "DeltaEditError",
    "Denoiser",
    "DenoiserConfig",
    "EditDirection",
    "EditRequest",
    "EditResult",
    "InversionConfig",
    "LatentClip",
    "NoiseSchedule",
    "PromptEmbedding",
    "ToyTextEncoder",
    "apply_edit",
    "attention_loss",
    "build_schedule",
    "chroma_similarity",
    "chromagram",
    "compute_delta",
    "constrained_edit_step",
    "ddim_invert_step",
    "ddim_step",
    "direction_for_keywords",
    "edit",
    "edit_real",
    "embed_prompt",
    "evaluate_batch",
    "invert",
    "predict_noise",
    "reconstruct_and_record",
    "synthesize_captions",
    "train_toy_denoiser",
]
