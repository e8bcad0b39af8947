"""Per-frame score tracks and the worst-window search.

A score track stores the predicted per-frame probability p that the frame is
unreliable; downstream consumers work with the confidence s = 1 - p. The
search in find_worst_segment slides a window of stride 1 over s and returns
the sample span under the lowest-mean window, earliest window on ties.
"""
from __future__ import annotations

import dataclasses

import numpy as np
from scipy.stats import rankdata

from .audio import SegmentSpan
from .errors import ConfigError, ShapeError
from .util import round_half_up

BCE_CLAMP = 1e-7


@dataclasses.dataclass(frozen=True, eq=False)
class ScoreTrack:
    """Frame-rate unreliability probabilities for one utterance.

    Args:
        p: float array in [0, 1], one value per encoder frame; p close to 1
            flags the frame as unreliable.
        frame_ms: frame period of the producing encoder (10 ms for the
            320/160 confidence front-end).
    """

    p: np.ndarray
    frame_ms: float = 10.0

    def __post_init__(self):
        arr = np.array(self.p, dtype=np.float64, copy=True)
        if arr.ndim != 1 or arr.size == 0:
            raise ShapeError(f"score track must be non-empty 1-D, got shape {arr.shape}")
        if np.any(~np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ShapeError("scores must lie in [0, 1]")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "p", arr)

    def __len__(self) -> int:
        return int(self.p.size)

    @property
    def confidence(self) -> np.ndarray:
        """s = 1 - p; high means the frame looks trustworthy."""
        return 1.0 - self.p


def _scores_of(pred) -> np.ndarray:
    return pred.p if isinstance(pred, ScoreTrack) else np.asarray(pred, dtype=np.float64)


def bce_loss(pred, labels) -> float:
    """Mean binary cross-entropy between predicted p and 0/1 frame labels.

    Predictions are clamped to [1e-7, 1 - 1e-7] before the logs so saturated
    outputs stay finite.
    """
    p = _scores_of(pred)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"prediction/label shape mismatch {p.shape} vs {y.shape}")
    p = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def frame_auc(pred, labels):
    """ROC-AUC of p against 0/1 labels via the rank statistic.

    Ties get averaged ranks; returns None when only one class is present.
    """
    p = _scores_of(pred)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise ShapeError(f"prediction/label shape mismatch {p.shape} vs {y.shape}")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(p)
    pos_rank_sum = float(np.sum(ranks[y == 1]))
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def precision_recall(pred, labels, threshold: float = 0.5):
    """(precision, recall) of the p >= threshold decision; None when undefined."""
    p = _scores_of(pred)
    y = np.asarray(labels)
    hit = p >= threshold
    tp = int(np.sum(hit & (y == 1)))
    fp = int(np.sum(hit & (y == 0)))
    fn = int(np.sum(~hit & (y == 1)))
    precision = tp / (tp + fp) if (tp + fp) else None
    recall = tp / (tp + fn) if (tp + fn) else None
    return precision, recall


def window_frames(g_samples: int, n_frames: int, n_samples: int) -> int:
    """Window length in frames for a g-sample chunk: round(g * n / T), min 1."""
    if n_frames < 1:
        raise ConfigError("empty score track")
    if g_samples < 1 or n_samples < g_samples:
        raise ConfigError(f"chunk of {g_samples} samples does not fit in {n_samples}")
    w = max(1, round_half_up(g_samples * n_frames / n_samples))
    if w > n_frames:
        raise ConfigError(f"window of {w} frames exceeds track length {n_frames}")
    return w


def find_worst_segment(track: ScoreTrack, g_samples: int, n_samples: int) -> SegmentSpan:
    """Sample span of length g_samples whose frames carry the lowest mean confidence.

    Window sums are evaluated per window (not via a running cumulative sum) so
    exactly-tied windows compare equal and the earliest one wins. The winning
    frame index i maps to samples via t = round(i * n_samples / len(track)),
    clamped so the span fits.

    Args:
        track: per-frame scores for the utterance.
        g_samples: chunk length in samples (G).
        n_samples: utterance length in samples (T).

    Returns:
        SegmentSpan [t, t + g_samples).
    """
    s = track.confidence
    n = s.size
    w = window_frames(g_samples, n, n_samples)
    windows = np.lib.stride_tricks.sliding_window_view(s, w)
    means = windows.sum(axis=1)  # /w skipped: argmin is scale-free
    i = int(np.argmin(means))  # argmin returns the first minimum
    t = round_half_up(i * n_samples / n)
    t = min(max(t, 0), n_samples - g_samples)
    return SegmentSpan(t, t + g_samples)
