"""Waveform container, span arithmetic, SNR mixing and WAV I/O.

Everything downstream works on mono 16 kHz float64 in [-1, 1] (clipping is
applied only when writing 16-bit files). Frame arithmetic for strided
encoders lives here too so the simulator, the confidence model and the
extraction backbone all agree on one formula.
"""
from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np
from scipy.io import wavfile

from .errors import DegenerateSignalError, ShapeError, UnsupportedFormatError

SAMPLE_RATE = 16000
PCM16_SCALE = 32767.0


@dataclasses.dataclass(frozen=True, eq=False)
class Waveform:
    """Immutable mono waveform.

    Args:
        samples: 1-D float array; copied, cast to float64 and made read-only.
        rate: sample rate in Hz; only 16 kHz is supported.
    """

    samples: np.ndarray
    rate: int = SAMPLE_RATE

    def __post_init__(self):
        # np.array (not asarray): freezing an uncopied input would make the
        # caller's own buffer read-only
        arr = np.array(self.samples, dtype=np.float64, copy=True)
        if arr.ndim != 1:
            raise ShapeError(f"waveform must be 1-D, got shape {arr.shape}")
        if arr.size == 0:
            raise ShapeError("waveform must be non-empty")
        if not np.all(np.isfinite(arr)):
            raise DegenerateSignalError("waveform contains non-finite samples")
        if self.rate != SAMPLE_RATE:
            raise UnsupportedFormatError(f"unsupported sample rate {self.rate}, need {SAMPLE_RATE}")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    def __len__(self) -> int:
        return int(self.samples.size)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.rate

    def energy(self) -> float:
        return float(np.dot(self.samples, self.samples))

    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.samples**2)))


@dataclasses.dataclass(frozen=True, order=True)
class SegmentSpan:
    """Half-open sample interval [start, end)."""

    start: int
    end: int

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise ShapeError(f"bad span [{self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start

    def overlap(self, other: "SegmentSpan") -> int:
        return max(0, min(self.end, other.end) - max(self.start, other.start))


@dataclasses.dataclass(frozen=True)
class EncoderGeometry:
    """Strided 1-D conv front-end: kernel length, hop and channel count."""

    kernel: int
    stride: int
    channels: int

    def __post_init__(self):
        if self.stride < 1 or self.kernel < self.stride:
            raise ShapeError(f"need kernel >= stride >= 1, got {self.kernel}/{self.stride}")
        if self.channels < 1:
            raise ShapeError("channels must be positive")


def frame_count(length: int, geom: EncoderGeometry) -> int:
    """Number of frames a valid (no padding) strided conv yields.

    floor((length - kernel) / stride) + 1; raises ShapeError when the signal
    is shorter than one kernel.
    """
    if length < geom.kernel:
        raise ShapeError(f"signal of {length} samples shorter than kernel {geom.kernel}")
    return (length - geom.kernel) // geom.stride + 1


def check_span(span: SegmentSpan, length: int) -> None:
    if span.end > length:
        raise ShapeError(f"span [{span.start}, {span.end}) exceeds length {length}")


def zero_span(w: Waveform, span: SegmentSpan) -> Waveform:
    """Copy of w with the span silenced."""
    check_span(span, len(w))
    out = w.samples.copy()
    out[span.start : span.end] = 0.0
    return Waveform(out, w.rate)


def mix_at_snr(target: Waveform, interferer: Waveform, snr_db: float, rng=None):
    """Scale the interferer to sit snr_db below the target, then sum.

    Args:
        target: reference speech y.
        interferer: competing speech z, same length as y.
        snr_db: target-to-interferer ratio of the returned mixture.
        rng: accepted for signature symmetry with the other samplers; the
            scaling itself is deterministic.

    Returns:
        (mixture, scaled_interferer) as Waveforms.
    """
    if len(target) != len(interferer):
        raise ShapeError(f"length mismatch {len(target)} vs {len(interferer)}")
    ey = target.energy()
    ez = interferer.energy()
    if ey == 0.0 or ez == 0.0:
        raise DegenerateSignalError("mixing requires both signals to carry energy")
    gain = float(np.sqrt(ey / (ez * 10.0 ** (snr_db / 10.0))))
    scaled = Waveform(gain * interferer.samples, target.rate)
    return Waveform(target.samples + scaled.samples, target.rate), scaled


def read_wav(path) -> Waveform:
    """Read a mono 16 kHz WAV (PCM16 or IEEE float32) into a Waveform."""
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise UnsupportedFormatError(f"{path}: {exc}") from exc
    if rate != SAMPLE_RATE:
        raise UnsupportedFormatError(f"{path}: sample rate {rate}, need {SAMPLE_RATE}")
    if data.ndim != 1:
        raise UnsupportedFormatError(f"{path}: expected mono, got shape {data.shape}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / PCM16_SCALE
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise UnsupportedFormatError(f"{path}: unsupported sample dtype {data.dtype}")
    return Waveform(samples, rate)


def write_wav(path, w: Waveform, fmt: str = "float32") -> None:
    """Write a Waveform as float32 (exact) or pcm16 (clipped + quantised)."""
    if fmt == "float32":
        wavfile.write(path, w.rate, w.samples.astype(np.float32))
    elif fmt == "pcm16":
        clipped = np.clip(w.samples, -1.0, 1.0)
        wavfile.write(path, w.rate, np.round(clipped * PCM16_SCALE).astype(np.int16))
    else:
        raise UnsupportedFormatError(f"unknown wav format {fmt!r}")


def merge_spans(spans: Sequence[SegmentSpan]) -> list[SegmentSpan]:
    """Union of half-open spans as a sorted list of disjoint spans.

    Touching spans ([0,5) + [5,9)) merge; the result covers exactly the same
    sample set as the input.
    """
    if not spans:
        return []
    ordered = sorted(spans, key=lambda s: (s.start, s.end))
    merged = [[ordered[0].start, ordered[0].end]]
    for sp in ordered[1:]:
        if sp.start <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], sp.end)
        else:
            merged.append([sp.start, sp.end])
    return [SegmentSpan(a, b) for a, b in merged]
