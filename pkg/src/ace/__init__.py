"""Desk-scale self-supervised pretraining with crop-correspondence objectives.

A numpy-only package: a small reverse-mode autodiff engine, grid-aligned
crop-pair geometry, composition/decomposition matching losses with a pooled
global consistency term, an EMA student/teacher encoder, a synthetic phantom
generator with landmark ground truth, a deterministic training loop, and a
probe suite that scores frozen checkpoints.
"""

from .config import RunConfig, load_config
from .cropgrid import CropPair, GridSpec, compute_overlap, sample_crop_pair
from .errors import AceError
from .model import EncoderConfig, EncoderState, encode, encode_batch, init
from .synthgen import Phantom, PhantomSpec, generate, generate_dataset, load_manifest
from .tensor import Tape, Tensor, backward, grad_check
from .trainer import train_loop, load_checkpoint, save_checkpoint

__all__ = [
    "AceError", "CropPair", "EncoderConfig", "EncoderState", "GridSpec",
    "Phantom", "PhantomSpec", "RunConfig", "Tape", "Tensor", "backward",
    "compute_overlap", "encode", "encode_batch", "generate", "generate_dataset",
    "grad_check", "init", "load_checkpoint", "load_config", "load_manifest",
    "sample_crop_pair", "save_checkpoint", "train_loop",
]

__version__ = "0.1.0"
