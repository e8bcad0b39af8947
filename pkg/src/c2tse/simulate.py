"""Controlled corruption of clean speech to mimic extraction failures.

A simulated extractor output keeps the clean target everywhere except a
random number of short spans, where it becomes alpha * target +
beta * interferer: residual target attenuation plus interferer leakage.
Frame labels mark a frame unreliable when at least half of its receptive
field lies inside a corrupted span; those labels are the training target for
the confidence model.
"""
from __future__ import annotations

import dataclasses
import os

import numpy as np

from .audio import EncoderGeometry, SegmentSpan, Waveform, frame_count, merge_spans, read_wav, write_wav
from .errors import ConfigError, ShapeError
from .metrics import si_sdr
from .util import derive_rng

# kernel/stride of the confidence front-end; labels are defined at this
# frame rate (the channel count does not matter for labelling)
LABEL_GEOMETRY = EncoderGeometry(kernel=320, stride=160, channels=1)
_SIM_SALT = 11  # keeps corpus-row rng streams distinct from other derivations


@dataclasses.dataclass(frozen=True)
class SimConfig:
    """Corruption parameters: blend weights, span count ceiling, span length."""

    alpha: float = 0.9
    beta: float = 0.2
    n_max: int = 20
    g_ms: float = 10.0

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0) or not (0.0 <= self.beta <= 1.0):
            raise ConfigError(f"blend weights must sit in [0, 1], got ({self.alpha}, {self.beta})")
        if self.n_max < 0:
            raise ConfigError("n_max must be >= 0")
        if self.g_samples < 1:
            raise ConfigError(f"span of {self.g_ms} ms is shorter than one sample")

    @property
    def g_samples(self) -> int:
        return int(round(self.g_ms * 16))  # 16 samples per ms at 16 kHz


@dataclasses.dataclass(frozen=True)
class SimulatedUtterance:
    """One corrupted output with its ground truth."""

    output: Waveform
    spans: tuple  # merged, disjoint SegmentSpans
    labels: np.ndarray  # int8 per confidence frame, 1 = unreliable
    n_drawn: int  # spans drawn before merging


def span_frame_labels(spans, n_samples: int, geom: EncoderGeometry = LABEL_GEOMETRY) -> np.ndarray:
    """Per-frame 0/1 labels from sample spans via interval overlap.

    Frame f spans samples [f*stride, f*stride + kernel); it is labelled 1
    when the merged spans cover at least half of that window (integer
    comparison, no float threshold).
    """
    n_frames = frame_count(n_samples, geom)
    starts = np.arange(n_frames, dtype=np.int64) * geom.stride
    overlap = np.zeros(n_frames, dtype=np.int64)
    for sp in merge_spans(list(spans)):
        lo = np.maximum(starts, sp.start)
        hi = np.minimum(starts + geom.kernel, sp.end)
        overlap += np.maximum(hi - lo, 0)
    return (2 * overlap >= geom.kernel).astype(np.int8)


def simulate_output(y: Waveform, z: Waveform, cfg: SimConfig, rng) -> SimulatedUtterance:
    """Corrupt y with interferer z according to cfg.

    Draws N ~ uniform{0..n_max} spans of g_samples each with uniform starts,
    merges overlaps, and blends alpha * y + beta * z once over the merged
    set, so a sample is never blended twice. The interferer may be longer
    than the target; the prefix is used.

    Returns:
        SimulatedUtterance; output equals y bit-exactly outside the spans.
    """
    t_len = len(y)
    if len(z) < t_len:
        raise ShapeError(f"interferer of {len(z)} samples shorter than target {t_len}")
    g = cfg.g_samples
    if g >= t_len:
        raise ConfigError(f"span of {g} samples does not fit an utterance of {t_len}")

    n = int(rng.integers(0, cfg.n_max + 1))
    raw = []
    for _ in range(n):
        start = int(rng.integers(0, t_len - g + 1))
        raw.append(SegmentSpan(start, start + g))
    merged = merge_spans(raw)

    out = y.samples.copy()
    zs = z.samples
    for sp in merged:
        out[sp.start : sp.end] = cfg.alpha * y.samples[sp.start : sp.end] + cfg.beta * zs[sp.start : sp.end]

    labels = span_frame_labels(merged, t_len)
    return SimulatedUtterance(Waveform(out), tuple(merged), labels, n)


@dataclasses.dataclass
class GridSearchResult:
    alphas: np.ndarray
    betas: np.ndarray
    mean_si_sdr_db: np.ndarray  # (len(alphas), len(betas)), may contain +-inf
    n_pairs: int

    def to_rows(self) -> list[dict]:
        rows = []
        for i, a in enumerate(self.alphas):
            for j, b in enumerate(self.betas):
                rows.append(
                    {
                        "alpha": round(float(a), 6),
                        "beta": round(float(b), 6),
                        "mean_si_sdr_db": float(self.mean_si_sdr_db[i, j]),
                    }
                )
        return rows

    def cell(self, alpha: float, beta: float) -> float:
        i = int(np.argmin(np.abs(self.alphas - alpha)))
        j = int(np.argmin(np.abs(self.betas - beta)))
        return float(self.mean_si_sdr_db[i, j])


def grid_search_alpha_beta(pairs, alphas=None, betas=None) -> GridSearchResult:
    """Mean SI-SDR of the global blend alpha*y + beta*z over a corpus.

    This calibrates the blend weights: the cell whose score matches the SI-SDR
    of a real extractor tells you which (alpha, beta) to simulate with. Cells
    with beta == 0 are +inf (the blend is a scaled copy of the reference).

    Args:
        pairs: iterable of (target Waveform, interferer Waveform).
        alphas, betas: grid axes; default 0..1 in steps of 0.1.
    """
    alphas = np.round(np.arange(0.0, 1.0001, 0.1), 10) if alphas is None else np.asarray(alphas, dtype=np.float64)
    betas = np.round(np.arange(0.0, 1.0001, 0.1), 10) if betas is None else np.asarray(betas, dtype=np.float64)
    pairs = [(y, z) for y, z in pairs]
    if not pairs:
        raise ConfigError("grid search needs at least one (target, interferer) pair")

    scores = np.zeros((len(alphas), len(betas)))
    for i, a in enumerate(alphas):
        for j, b in enumerate(betas):
            vals = []
            for y, z in pairs:
                t_len = len(y)
                if len(z) < t_len:
                    raise ShapeError("interferer shorter than target in grid pair")
                blend = a * y.samples + b * z.samples[:t_len]
                if not blend.any():
                    vals.append(-np.inf)  # alpha == beta == 0: silence
                else:
                    vals.append(si_sdr(blend, y.samples))
            scores[i, j] = np.mean(vals)
    return GridSearchResult(alphas, betas, scores, len(pairs))


def build_fcs_corpus(
    targets: list,
    interferers: list,
    cfg: SimConfig,
    count: int,
    seed: int,
    out_dir,
    split: str = "train",
    start_uid: int = 0,
) -> list[dict]:
    """Simulate `count` corrupted outputs from pools of wav paths.

    Instance j uses target j % len(targets) and an interferer drawn from the
    pool by the instance rng, which is derived from (seed, salt, uid) so any
    instance can be regenerated in isolation. Outputs are written as float32
    WAVs under out_dir/wav; the returned manifest rows embed span bounds and
    frame labels.

    Args:
        targets: paths of clean target wavs.
        interferers: paths of interferer wavs.
        cfg: corruption parameters.
        count: number of simulated utterances.
        seed: master seed.
        out_dir: corpus root; wav/ is created inside.
        split: split tag stored per row.
        start_uid: first utterance id, so several calls can share a manifest.

    Returns:
        List of manifest row dicts.
    """
    if not targets or not interferers:
        raise ConfigError("empty target or interferer pool")
    if count < 1:
        raise ConfigError("count must be >= 1")
    wav_dir = os.path.join(str(out_dir), "wav")
    os.makedirs(wav_dir, exist_ok=True)

    rows = []
    for j in range(count):
        uid = start_uid + j
        rng = derive_rng(seed, _SIM_SALT, uid)
        t_path = targets[j % len(targets)]
        z_path = interferers[int(rng.integers(0, len(interferers)))]
        y = read_wav(t_path)
        z = read_wav(z_path)
        sim = simulate_output(y, z, cfg, rng)

        name = f"sim{uid:05d}"
        rel = os.path.join("wav", f"{name}.wav")
        write_wav(os.path.join(str(out_dir), rel), sim.output)
        rows.append(
            {
                "id": name,
                "split": split,
                "wav_path": rel,
                "clean_path": str(t_path),
                "interferer_path": str(z_path),
                "spans": [[sp.start, sp.end] for sp in sim.spans],
                "labels": sim.labels.tolist(),
                "n_drawn": sim.n_drawn,
                "alpha": cfg.alpha,
                "beta": cfg.beta,
                "n_max": cfg.n_max,
                "g_ms": cfg.g_ms,
                "seed": seed,
            }
        )
    return rows
