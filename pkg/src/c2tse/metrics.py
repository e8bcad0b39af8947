"""Scale-invariant SDR metrics and the chunk-level confidence study.

The SI-SDR here follows the projection form: the reference-aligned component
is <est, ref>/||ref||^2 * ref and the score is the energy ratio between that
component and the residual, in dB. Perfect reconstruction (zero residual)
returns +inf and a zero-energy projection returns -inf; callers that need
finite statistics clip at the edges (see run_chunk_study).
"""
from __future__ import annotations

import dataclasses
import math

import numpy as np

from .audio import SegmentSpan, Waveform, check_span
from .errors import DegenerateSignalError, ShapeError
from .tracks import ScoreTrack, find_worst_segment

N_PERMUTATIONS = 10000
CHUNK_CLIP_DB = 60.0


def _samples(x) -> np.ndarray:
    if isinstance(x, Waveform):
        return x.samples
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"expected 1-D signal, got shape {arr.shape}")
    return arr


def si_sdr(est, ref) -> float:
    """Scale-invariant SDR of est against ref, in dB.

    Returns +inf for an exact (up to scale) reconstruction and -inf when est
    carries no component along ref. Raises DegenerateSignalError for a
    zero-energy reference.
    """
    e = _samples(est)
    r = _samples(ref)
    if e.shape != r.shape:
        raise ShapeError(f"length mismatch {e.shape} vs {r.shape}")
    ref_energy = float(np.dot(r, r))
    if ref_energy == 0.0:
        raise DegenerateSignalError("reference signal has zero energy")
    coeff = float(np.dot(e, r)) / ref_energy
    proj = coeff * r
    resid = e - proj
    num = float(np.dot(proj, proj))
    den = float(np.dot(resid, resid))
    # num first: a zero estimate has zero residual too, and that case is a
    # total miss, not a perfect reconstruction
    if num == 0.0:
        return -math.inf
    if den == 0.0:
        return math.inf
    return 10.0 * math.log10(num / den)


def si_sdri(est, mix, ref) -> float:
    """SI-SDR improvement of est over the unprocessed mixture.

    Matching infinities cancel to 0.0 instead of producing NaN.
    """
    a = si_sdr(est, ref)
    b = si_sdr(mix, ref)
    if math.isinf(a) and math.isinf(b) and a == b:
        return 0.0
    return a - b


def sdr_plain(est, ref) -> float:
    """Non-scale-invariant SDR: 10 log10(||ref||^2 / ||ref - est||^2)."""
    e = _samples(est)
    r = _samples(ref)
    if e.shape != r.shape:
        raise ShapeError(f"length mismatch {e.shape} vs {r.shape}")
    ref_energy = float(np.dot(r, r))
    if ref_energy == 0.0:
        raise DegenerateSignalError("reference signal has zero energy")
    diff = r - e
    den = float(np.dot(diff, diff))
    if den == 0.0:
        return math.inf
    return 10.0 * math.log10(ref_energy / den)


def chunk_si_sdr(est, ref, span: SegmentSpan) -> float:
    """SI-SDR restricted to one sample span of both signals."""
    e = _samples(est)
    r = _samples(ref)
    if e.shape != r.shape:
        raise ShapeError(f"length mismatch {e.shape} vs {r.shape}")
    check_span(span, e.size)
    return si_sdr(e[span.start : span.end], r[span.start : span.end])


def paired_permutation_pvalue(worse, better, rng, n_perm: int = N_PERMUTATIONS) -> float:
    """One-sided sign-flip test that mean(better - worse) > 0.

    Returns (1 + #{permuted mean >= observed}) / (n_perm + 1); small values
    mean the observed ordering is unlikely under exchangeability.
    """
    d = np.asarray(better, dtype=np.float64) - np.asarray(worse, dtype=np.float64)
    if d.size == 0:
        raise ShapeError("permutation test needs at least one pair")
    obs = d.mean()
    signs = rng.integers(0, 2, size=(n_perm, d.size)) * 2 - 1
    stats = (signs * d).mean(axis=1)
    return float((1 + int(np.sum(stats >= obs))) / (n_perm + 1))


@dataclasses.dataclass
class ChunkStudyReport:
    """Aggregate of the unreliable / reliable / random chunk comparison."""

    chunk_ms: int
    n_evaluated: int
    means_db: dict
    p_unreliable_vs_reliable: float | None
    p_unreliable_vs_random: float | None
    skipped: dict
    clip_db: float
    values_db: dict

    def to_dict(self) -> dict:
        return {
            "chunk_ms": self.chunk_ms,
            "n_evaluated": self.n_evaluated,
            "means_db": self.means_db,
            "p_unreliable_vs_reliable": self.p_unreliable_vs_reliable,
            "p_unreliable_vs_random": self.p_unreliable_vs_random,
            "skipped": self.skipped,
            "clip_db": self.clip_db,
        }

    def to_rows(self) -> list[dict]:
        rows = []
        for cat in ("unreliable", "reliable", "random"):
            rows.append(
                {
                    "chunk_ms": self.chunk_ms,
                    "category": cat,
                    "mean_si_sdr_db": self.means_db[cat],
                    "n": self.n_evaluated,
                }
            )
        return rows


def run_chunk_study(pairs, chunk_ms: int, rng, clip_db: float = CHUNK_CLIP_DB) -> ChunkStudyReport:
    """Compare extraction quality on predicted-unreliable vs other chunks.

    For every (est, ref, track) triple the least-confident chunk comes from
    find_worst_segment, a reliable chunk is drawn uniformly among the starts
    that do not overlap it, and a random chunk is drawn uniformly over all
    valid starts. Chunk SI-SDRs are clipped to +-clip_db before averaging and
    testing, because chunks of simulated outputs can be bit-exact copies of
    the reference (+inf). Utterances are skipped, and counted, when they are
    shorter than the chunk, when no non-overlapping reliable start exists, or
    when any of the three reference chunks is silent.

    Args:
        pairs: iterable of (est Waveform, ref Waveform, ScoreTrack).
        chunk_ms: chunk duration in milliseconds.
        rng: master numpy Generator; per-utterance child generators are
            derived from it so the loop could be fanned out without changing
            any draw.

    Returns:
        ChunkStudyReport with per-category means, both one-sided p-values
        (unreliable vs reliable, unreliable vs random) and skip counters.
    """
    pairs = list(pairs)
    g = chunk_ms * 16  # samples at 16 kHz
    child_seeds = rng.integers(0, 2**63, size=max(len(pairs), 1))
    perm_rng = np.random.default_rng(rng.integers(0, 2**63))

    values = {"unreliable": [], "reliable": [], "random": []}
    skipped = {"short": 0, "no_reliable_region": 0, "silent_chunk": 0}

    for idx, (est, ref, track) in enumerate(pairs):
        e = _samples(est)
        r = _samples(ref)
        if e.shape != r.shape:
            raise ShapeError(f"utterance {idx}: est/ref length mismatch")
        t_len = e.size
        if t_len < g:
            skipped["short"] += 1
            continue
        u_rng = np.random.default_rng(child_seeds[idx])
        unrel = find_worst_segment(track, g, t_len)

        left = unrel.start - g + 1  # starts ending at or before unrel.start
        right = (t_len - g) - unrel.end + 1  # starts from unrel.end on
        left = max(left, 0)
        right = max(right, 0)
        if left + right == 0:
            skipped["no_reliable_region"] += 1
            continue
        k = int(u_rng.integers(0, left + right))
        rel_start = k if k < left else unrel.end + (k - left)
        rel = SegmentSpan(rel_start, rel_start + g)
        rand_start = int(u_rng.integers(0, t_len - g + 1))
        rand = SegmentSpan(rand_start, rand_start + g)

        try:
            triple = {
                "unreliable": chunk_si_sdr(e, r, unrel),
                "reliable": chunk_si_sdr(e, r, rel),
                "random": chunk_si_sdr(e, r, rand),
            }
        except DegenerateSignalError:
            skipped["silent_chunk"] += 1
            continue
        for cat, val in triple.items():
            values[cat].append(float(np.clip(val, -clip_db, clip_db)))

    n_eval = len(values["unreliable"])
    if n_eval > 0:
        means = {cat: float(np.mean(vals)) for cat, vals in values.items()}
        p_rel = paired_permutation_pvalue(values["unreliable"], values["reliable"], perm_rng)
        p_rand = paired_permutation_pvalue(values["unreliable"], values["random"], perm_rng)
    else:
        means = {cat: math.nan for cat in values}
        p_rel = p_rand = None

    return ChunkStudyReport(
        chunk_ms=chunk_ms,
        n_evaluated=n_eval,
        means_db=means,
        p_unreliable_vs_reliable=p_rel,
        p_unreliable_vs_random=p_rand,
        skipped=skipped,
        clip_db=clip_db,
        values_db={cat: np.asarray(vals) for cat, vals in values.items()},
    )
