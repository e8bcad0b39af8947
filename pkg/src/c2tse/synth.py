"""Synthetic speech-like corpus: harmonic voices, mixtures and manifests.

The generator is not a vocoder; it only has to exercise the pipeline the way
speech would. Each utterance is a harmonic series under a drifting f0 with a
few random formant resonances, syllabic amplitude modulation in the 3-6 Hz
range and a faint breath-noise floor. Interferers come from the same family
with independent draws, so a mixture is two "voices" at a sampled SNR.
"""
from __future__ import annotations

import os

import numpy as np
from scipy import signal as sps

from .audio import SAMPLE_RATE, Waveform, mix_at_snr, write_wav
from .cues import make_cue, save_cue
from .errors import ConfigError
from .util import derive_rng, write_jsonl

SNR_RANGE_DB = (-10.0, 10.0)
DURATION_S = 4.0


def sample_snr_db(rng) -> float:
    """Mixture SNR draw, uniform over [-10, 10] dB."""
    return float(rng.uniform(*SNR_RANGE_DB))


def _smooth(x: np.ndarray, width: int) -> np.ndarray:
    kernel = np.ones(width) / width
    return np.convolve(x, kernel, mode="same")


def speechlike_utterance(rng, duration_s: float = DURATION_S, rate: int = SAMPLE_RATE) -> Waveform:
    """One synthetic voiced utterance.

    Args:
        rng: seeded numpy Generator; every random choice comes from it.
        duration_s: utterance length in seconds.

    Returns:
        Waveform with RMS in roughly [0.05, 0.12] and peak below 0.97.
    """
    n = int(round(duration_s * rate))
    if n < rate // 4:
        raise ConfigError(f"utterance of {duration_s} s is too short to synthesise")
    t = np.arange(n) / rate

    # f0 contour: smoothed log-domain random walk at 100 Hz, clipped to 80-300 Hz
    n_ctrl = int(duration_s * 100) + 2
    walk = np.cumsum(rng.normal(0.0, 0.025, n_ctrl))
    log_f0 = walk - walk.mean() + np.log(rng.uniform(110.0, 260.0))
    f0_ctrl = np.clip(np.exp(_smooth(log_f0, 9)), 80.0, 300.0)
    f0 = np.interp(t, np.linspace(0.0, duration_s, n_ctrl), f0_ctrl)
    phase = 2.0 * np.pi * np.cumsum(f0) / rate

    n_harm = 12
    sig = np.zeros(n)
    amps = rng.uniform(0.5, 1.5, n_harm) / np.arange(1, n_harm + 1)
    phis = rng.uniform(0.0, 2.0 * np.pi, n_harm)
    for k in range(n_harm):
        sig += amps[k] * np.sin((k + 1) * phase + phis[k])

    # three formant-ish resonances
    for _ in range(3):
        fc = rng.uniform(300.0, 3400.0)
        q = rng.uniform(2.0, 8.0)
        b, a = sps.iirpeak(fc, q, fs=rate)
        sig = sps.lfilter(b, a, sig)

    # syllabic AM; the floor keeps even the valleys audible so local
    # corruption stays detectable everywhere
    am_rate = rng.uniform(3.0, 6.0)
    am_floor = rng.uniform(0.2, 0.35)
    am_shape = rng.uniform(1.0, 3.0)
    am = am_floor + (1.0 - am_floor) * (0.5 + 0.5 * np.sin(2.0 * np.pi * am_rate * t + rng.uniform(0.0, 2.0 * np.pi))) ** am_shape

    # slow loudness drift at ~2 Hz
    n_slow = int(duration_s * 2) + 2
    slow = np.interp(t, np.linspace(0.0, duration_s, n_slow), rng.uniform(0.6, 1.0, n_slow))

    sig = sig * am * slow
    sig += rng.normal(0.0, 1.0, n) * 0.002 * float(np.std(sig))

    target_rms = rng.uniform(0.05, 0.12)
    sig *= target_rms / np.sqrt(np.mean(sig**2))
    peak = np.max(np.abs(sig))
    if peak > 0.97:
        sig *= 0.97 / peak
    return Waveform(sig)


def build_mix_corpus(
    out_dir,
    counts: dict,
    seed: int,
    duration_s: float = DURATION_S,
    cue_noise: float = 0.02,
    cue_dim: int = 20,
) -> str:
    """Generate a mixture corpus with cue tracks and a JSONL manifest.

    Per row: independent target and interferer utterances, a mixture at a
    uniform [-10, 10] dB SNR, and the target's cue track. WAVs are written as
    IEEE float32 so mixtures above full scale survive exactly and reading one
    back is bit-identical. Every row's randomness is derived from
    (seed, row index), so the corpus is byte-reproducible and order-free.

    Args:
        out_dir: destination directory; wav/ and cue/ subdirs are created.
        counts: rows per split, e.g. {"train": 600, "val": 100, "test": 200}.
        seed: master seed.

    Returns:
        Path of the manifest file.
    """
    for split, cnt in counts.items():
        if cnt < 0:
            raise ConfigError(f"negative count for split {split}")
    out_dir = str(out_dir)
    wav_dir = os.path.join(out_dir, "wav")
    cue_dir = os.path.join(out_dir, "cue")
    os.makedirs(wav_dir, exist_ok=True)
    os.makedirs(cue_dir, exist_ok=True)

    rows = []
    uid = 0
    for split in sorted(counts):
        for _ in range(counts[split]):
            rng = derive_rng(seed, uid)
            target = speechlike_utterance(rng, duration_s)
            interferer = speechlike_utterance(rng, duration_s)
            snr_db = sample_snr_db(rng)
            mixture, _ = mix_at_snr(target, interferer, snr_db)
            cue = make_cue(target, cue_noise, rng, n_bands=cue_dim)

            name = f"utt{uid:05d}"
            paths = {
                "target": os.path.join("wav", f"{name}_target.wav"),
                "interferer": os.path.join("wav", f"{name}_interferer.wav"),
                "mixture": os.path.join("wav", f"{name}_mixture.wav"),
                "cue": os.path.join("cue", f"{name}_cue.npy"),
            }
            write_wav(os.path.join(out_dir, paths["target"]), target)
            write_wav(os.path.join(out_dir, paths["interferer"]), interferer)
            write_wav(os.path.join(out_dir, paths["mixture"]), mixture)
            save_cue(os.path.join(out_dir, paths["cue"]), cue)

            rows.append(
                {
                    "id": name,
                    "split": split,
                    "snr_db": round(snr_db, 6),
                    "duration_s": duration_s,
                    "cue_dim": cue_dim,
                    "cue_noise": cue_noise,
                    "seed": seed,
                    **{f"{k}_path": v for k, v in paths.items()},
                }
            )
            uid += 1

    manifest = os.path.join(out_dir, "manifest.jsonl")
    write_jsonl(manifest, rows)
    return manifest
