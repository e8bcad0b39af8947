"""Target cue tracks: a 25 Hz log-mel sketch of the clean target.

The cue plays the role the visual stream plays at full scale: a low-rate,
target-discriminative side channel that is cheap to corrupt in controlled
ways. Frames are non-overlapping 640-sample windows (exactly 25 per second
at 16 kHz), projected onto a small mel filterbank, log-compressed and
standardised per utterance; optional Gaussian perturbation models capture
noise.
"""
from __future__ import annotations

import dataclasses
from functools import lru_cache

import numpy as np

from .audio import SAMPLE_RATE, Waveform
from .errors import ConfigError, ShapeError

CUE_RATE_HZ = 25.0
CUE_WINDOW = SAMPLE_RATE // 25  # 640 samples
_LOG_FLOOR = 1e-8


@dataclasses.dataclass(frozen=True, eq=False)
class CueTrack:
    """Per-frame cue vectors, shape (n_frames, n_bands)."""

    frames: np.ndarray
    rate_hz: float = CUE_RATE_HZ

    def __post_init__(self):
        arr = np.array(self.frames, dtype=np.float64, copy=True)
        if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ShapeError(f"cue track must be non-empty 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ShapeError("cue track contains non-finite values")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "frames", arr)

    def __len__(self) -> int:
        return int(self.frames.shape[0])

    @property
    def dim(self) -> int:
        return int(self.frames.shape[1])


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def _mel_filterbank(n_bands: int, n_fft: int, fmin: float = 60.0, fmax: float = 7600.0) -> np.ndarray:
    """Triangular filters, shape (n_bands, n_fft//2 + 1)."""
    n_bins = n_fft // 2 + 1
    freqs = np.linspace(0.0, SAMPLE_RATE / 2.0, n_bins)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_bands + 2))
    fb = np.zeros((n_bands, n_bins))
    for b in range(n_bands):
        lo, mid, hi = edges[b], edges[b + 1], edges[b + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[b] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def make_cue(y: Waveform, noise_level: float, rng, n_bands: int = 20) -> CueTrack:
    """Cue track of an utterance: standardised log-mel band energies at 25 Hz.

    Args:
        y: source waveform, at least one 640-sample window long.
        noise_level: std of the additive Gaussian perturbation, in units of
            the standardised cue scale; 0 leaves the track exact.
        rng: numpy Generator; consumed only when noise_level > 0.
        n_bands: number of mel bands.

    Returns:
        CueTrack of shape (floor(len(y)/640), n_bands).
    """
    if n_bands < 1:
        raise ConfigError("n_bands must be positive")
    if noise_level < 0:
        raise ConfigError("noise_level must be >= 0")
    n_frames = len(y) // CUE_WINDOW
    if n_frames < 1:
        raise ShapeError(f"waveform of {len(y)} samples yields no 640-sample cue frame")

    windows = y.samples[: n_frames * CUE_WINDOW].reshape(n_frames, CUE_WINDOW)
    taper = np.hanning(CUE_WINDOW)
    spectra = np.fft.rfft(windows * taper, axis=1)
    power = np.abs(spectra) ** 2
    mel = power @ _mel_filterbank(n_bands, CUE_WINDOW).T
    logmel = np.log(mel + _LOG_FLOOR)

    mean = logmel.mean()
    std = max(float(logmel.std()), 1e-8)
    cue = (logmel - mean) / std
    if noise_level > 0:
        cue = cue + rng.normal(0.0, noise_level, cue.shape)
    return CueTrack(cue)


def corrupt_cue(cue: CueTrack, mode: str, severity: float, rng) -> CueTrack:
    """Degrade a cue track for robustness evaluation.

    Modes:
        occlusion: zero a contiguous block of floor(severity * n) frames; the
            block position comes from rng.
        lowres: blend each frame towards its neighbour average and quantise,
            both scaled by severity; deterministic.

    severity == 0 returns the input track unchanged (bit-exact).
    """
    if not (0.0 <= severity <= 1.0):
        raise ConfigError(f"severity must be in [0, 1], got {severity}")
    if severity == 0.0:
        return cue
    frames = cue.frames.copy()
    n = frames.shape[0]
    if mode == "occlusion":
        k = int(np.floor(severity * n))
        if k == 0:
            return cue
        start = int(rng.integers(0, n - k + 1))
        frames[start : start + k] = 0.0
    elif mode == "lowres":
        blurred = frames.copy()
        blurred[1:-1] = (frames[:-2] + frames[1:-1] + frames[2:]) / 3.0
        frames = (1.0 - severity) * frames + severity * blurred
        step = 0.5 * severity
        frames = np.round(frames / step) * step
    else:
        raise ConfigError(f"unknown cue corruption mode {mode!r}")
    return CueTrack(frames, cue.rate_hz)


def save_cue(path, cue: CueTrack) -> None:
    np.save(path, cue.frames.astype(np.float32))


def load_cue(path) -> CueTrack:
    return CueTrack(np.load(path).astype(np.float64))
