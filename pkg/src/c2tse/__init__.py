"""Confidence-scored target speaker extraction, desk scale.

Simulates extraction failures with controlled corruption, trains a
fine-grained per-frame confidence scorer on them, and uses the scorer to
drive mask-and-recover fine-tuning of a small time-domain extractor.
"""

from .audio import EncoderGeometry, SegmentSpan, Waveform, frame_count, merge_spans, mix_at_snr, read_wav, write_wav, zero_span
from .backbone import BackboneConfig, BackboneState, ExtractionBackbone, MixCorpus, evaluate_extraction, pretrain
from .checkpoint import Checkpoint, lineage_of, load_checkpoint, save_checkpoint
from .cues import CueTrack, corrupt_cue, make_cue
from .errors import (
    C2tseError,
    CheckpointError,
    ConfigError,
    DegenerateSignalError,
    LifecycleError,
    LockError,
    ShapeError,
    UnsupportedFormatError,
)
from .fcs import FcsConfig, FcsModel, evaluate_fcs, train_fcs
from .finetune import FinetuneConfig, stage1_global, stage2_ss, stage2_supervised
from .mar import FrameMask, MarConfig, RecoveryBlock, derive_frame_mask, mar_loss, target_embedding
from .metrics import ChunkStudyReport, chunk_si_sdr, run_chunk_study, sdr_plain, si_sdr, si_sdri
from .simulate import SimConfig, SimulatedUtterance, build_fcs_corpus, grid_search_alpha_beta, simulate_output
from .synth import build_mix_corpus, speechlike_utterance
from .tracks import ScoreTrack, bce_loss, find_worst_segment, frame_auc

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "BackboneState",
    "C2tseError",
    "Checkpoint",
    "CheckpointError",
    "ChunkStudyReport",
    "ConfigError",
    "CueTrack",
    "DegenerateSignalError",
    "EncoderGeometry",
    "ExtractionBackbone",
    "FcsConfig",
    "FcsModel",
    "FinetuneConfig",
    "FrameMask",
    "LifecycleError",
    "LockError",
    "MarConfig",
    "MixCorpus",
    "RecoveryBlock",
    "ScoreTrack",
    "SegmentSpan",
    "ShapeError",
    "SimConfig",
    "SimulatedUtterance",
    "UnsupportedFormatError",
    "Waveform",
    "bce_loss",
    "build_fcs_corpus",
    "build_mix_corpus",
    "chunk_si_sdr",
    "corrupt_cue",
    "derive_frame_mask",
    "evaluate_extraction",
    "evaluate_fcs",
    "find_worst_segment",
    "frame_auc",
    "frame_count",
    "grid_search_alpha_beta",
    "lineage_of",
    "load_checkpoint",
    "make_cue",
    "mar_loss",
    "merge_spans",
    "mix_at_snr",
    "pretrain",
    "read_wav",
    "run_chunk_study",
    "save_checkpoint",
    "sdr_plain",
    "si_sdr",
    "si_sdri",
    "simulate_output",
    "speechlike_utterance",
    "stage1_global",
    "stage2_ss",
    "stage2_supervised",
    "target_embedding",
    "train_fcs",
    "write_wav",
    "zero_span",
]
