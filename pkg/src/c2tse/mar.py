"""Mask-and-recover: frame masks, the recovery block and the MAR objective.

During fine-tuning a sample span of the input is silenced; the recovery
block, a small transformer over the concatenated speech and cue embeddings,
must re-synthesise the masked frames while leaving the rest alone. The MAR
loss weighs embedding MSE on masked frames, embedding MSE on the remainder,
and the waveform SI-SDR of the decoded output.
"""
from __future__ import annotations

import dataclasses

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import EncoderGeometry, SegmentSpan
from .errors import ConfigError, ShapeError
from .nets import TransformerStack, si_sdr_torch

MAR_WEIGHTS = (1.0, 5.0, 1.0)  # theta (masked), delta (unmasked), lambda (SI-SDR)


@dataclasses.dataclass(frozen=True)
class MarConfig:
    """Recovery block size and loss weights."""

    layers: int = 2
    heads: int = 2
    width: int = 64
    pool: int = 8  # internal temporal pooling factor; 1 disables
    theta: float = MAR_WEIGHTS[0]
    delta: float = MAR_WEIGHTS[1]
    lam: float = MAR_WEIGHTS[2]

    def __post_init__(self):
        if self.layers < 1 or self.heads < 1 or self.width < 1 or self.pool < 1:
            raise ConfigError("recovery block sizes must be positive")
        if self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} not divisible by {self.heads} heads")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MarConfig":
        return cls(**d)


@dataclasses.dataclass(frozen=True, eq=False)
class FrameMask:
    """0/1 indicator over encoder frames; 1 = frame is masked."""

    indicator: np.ndarray

    def __post_init__(self):
        arr = np.array(self.indicator, dtype=np.int8, copy=True)
        if arr.ndim != 1 or arr.size == 0:
            raise ShapeError(f"frame mask must be non-empty 1-D, got {arr.shape}")
        if not np.isin(arr, (0, 1)).all():
            raise ShapeError("frame mask entries must be 0 or 1")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "indicator", arr)

    def __len__(self) -> int:
        return int(self.indicator.size)

    @property
    def complement(self) -> np.ndarray:
        return (1 - self.indicator).astype(np.int8)

    def count(self) -> int:
        return int(self.indicator.sum())


def derive_frame_mask(span: SegmentSpan, geom: EncoderGeometry, n_frames: int) -> FrameMask:
    """Frames whose receptive field is at least half inside the span.

    Same half-coverage rule as the simulator's labels, applied at the
    backbone's frame rate.
    """
    if n_frames < 1:
        raise ShapeError("need at least one frame")
    starts = np.arange(n_frames, dtype=np.int64) * geom.stride
    lo = np.maximum(starts, span.start)
    hi = np.minimum(starts + geom.kernel, span.end)
    overlap = np.maximum(hi - lo, 0)
    return FrameMask((2 * overlap >= geom.kernel).astype(np.int8))


def mask_batch_tensor(spans, geom: EncoderGeometry, n_frames: int) -> torch.Tensor:
    """Stack per-item frame masks into a float tensor (B, F)."""
    rows = [derive_frame_mask(sp, geom, n_frames).indicator for sp in spans]
    return torch.from_numpy(np.stack(rows).astype(np.float32))


class RecoveryBlock(nn.Module):
    """Residual transformer over concatenated speech/cue embeddings.

    The final projection starts at zero, so at initialisation the block is
    an identity on X. Attention runs on a temporally pooled copy of the
    sequence (cfg.pool frames per token) to keep full-utterance context
    affordable on CPU; the residual path stays at the full frame rate.
    """

    def __init__(self, x_channels: int, v_channels: int, cfg: MarConfig):
        super().__init__()
        self.pool = cfg.pool
        self.in_proj = nn.Linear(x_channels + v_channels, cfg.width)
        self.stack = TransformerStack(cfg.width, cfg.layers, cfg.heads)
        self.out_proj = nn.Linear(cfg.width, x_channels)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, x: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        # x: (B, Cx, F) speech embedding, v: (B, Cv, F) upsampled cue embedding
        if x.shape[-1] != v.shape[-1]:
            raise ShapeError(f"frame mismatch {x.shape[-1]} vs {v.shape[-1]}")
        n_frames = x.shape[-1]
        h = torch.cat([x, v], dim=1).transpose(1, 2)  # (B, F, Cx+Cv)
        h = self.in_proj(h)
        if self.pool > 1:
            # mean over each pool group; ragged tail averages its real members
            h = F.avg_pool1d(h.transpose(1, 2), self.pool, stride=self.pool, ceil_mode=True, count_include_pad=False)
            h = h.transpose(1, 2)
        h = self.stack(h)
        if self.pool > 1:
            h = h.repeat_interleave(self.pool, dim=1)[:, :n_frames]
        delta = self.out_proj(h)  # (B, F, Cx)
        return x + delta.transpose(1, 2)


def target_embedding(encoder: nn.Module, y: torch.Tensor) -> torch.Tensor:
    """Y = encoder(clean target), detached so no gradient reaches it."""
    with torch.no_grad():
        emb = encoder(y.unsqueeze(1))
    return emb.detach()


def _region_mse(diff2: torch.Tensor, region: torch.Tensor) -> torch.Tensor:
    """Per-item mean of diff2 over region frames; 0 where the region is empty.

    diff2: (B, C, F) squared errors; region: (B, F) in {0, 1}.
    """
    weights = region.unsqueeze(1)  # (B, 1, F)
    sums = (diff2 * weights).sum(dim=(1, 2))
    counts = weights.sum(dim=(1, 2)) * diff2.shape[1]
    safe = torch.clamp(counts, min=1.0)
    return torch.where(counts > 0, sums / safe, torch.zeros_like(sums))


def mar_loss(
    x_hat: torch.Tensor,
    y_emb: torch.Tensor,
    mask: torch.Tensor,
    y_hat_wav: torch.Tensor,
    y_wav: torch.Tensor,
    weights=MAR_WEIGHTS,
):
    """theta * masked MSE + delta * unmasked MSE + lambda * (-SI-SDR).

    MSEs compare the recovered embedding X_hat with the clean-target
    embedding Y over masked and unmasked frames separately, each normalised
    by its own element count per item; an empty region contributes 0. The
    SI-SDR term scores the decoded waveform. All three are averaged over the
    batch.

    Args:
        x_hat: (B, C, F) recovered embedding.
        y_emb: (B, C, F) detached clean-target embedding.
        mask: (B, F) float 0/1, 1 = masked frame.
        y_hat_wav, y_wav: (B, T) decoded output and clean reference.
        weights: (theta, delta, lam).

    Returns:
        (total, parts) with parts = dict of the three batch-mean terms.
    """
    if x_hat.shape != y_emb.shape:
        raise ShapeError(f"embedding shape mismatch {tuple(x_hat.shape)} vs {tuple(y_emb.shape)}")
    if mask.shape != (x_hat.shape[0], x_hat.shape[2]):
        raise ShapeError(f"mask shape {tuple(mask.shape)} does not match embeddings")
    theta, delta, lam = weights
    diff2 = (x_hat - y_emb) ** 2
    masked = _region_mse(diff2, mask)
    unmasked = _region_mse(diff2, 1.0 - mask)
    neg_si = -si_sdr_torch(y_hat_wav, y_wav)
    total = (theta * masked + delta * unmasked + lam * neg_si).mean()
    parts = {
        "mse_masked": float(masked.detach().mean()),
        "mse_unmasked": float(unmasked.detach().mean()),
        "neg_si_sdr": float(neg_si.detach().mean()),
    }
    return total, parts
