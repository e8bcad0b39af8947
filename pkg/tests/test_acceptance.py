"""Release gate: ten numbered end-to-end checks.

Checks 01-04 verify the numeric core against brute-force oracles written
inline in this file. Checks 05-10 drive the real CLI twice, as
subprocesses with fixed seeds, and assert the directional results on the
artifacts it writes: scorer quality, chunk-level confidence ordering, the
fine-tuning gains, the suboptimal-scorer ablation, freeze/lifecycle
discipline and run-to-run determinism. Each check also asserts its own
wall-clock budget; the terminal summary (conftest) prints one [PASS]/[FAIL]
line per check.

The pipeline fixtures are module-scoped and expensive (tens of minutes in
total at desk scale); run this file alone with `pytest tests/test_acceptance.py -v`.
"""
from __future__ import annotations

import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest
import torch

from c2tse.audio import EncoderGeometry, Waveform
from c2tse.errors import LifecycleError
from c2tse.fcs import FcsConfig, FcsNet, bce_loss_torch
from c2tse.mar import MarConfig, RecoveryBlock, mar_loss, mask_batch_tensor
from c2tse.metrics import si_sdr, si_sdri
from c2tse.simulate import SimConfig, simulate_output
from c2tse.tracks import ScoreTrack, SegmentSpan, find_worst_segment

SEED = 202
TIMINGS: dict = {}


def timed(name):
    class _Timer:
        def __enter__(self):
            self.t0 = time.monotonic()
            return self

        def __exit__(self, *exc):
            TIMINGS[name] = time.monotonic() - self.t0

    return _Timer()


# ---------------------------------------------------------------- 01-04


def test_01_si_sdr_metric_oracles():
    with timed("01"):
        rng = np.random.default_rng(11)
        worst_scale = 0.0
        for _ in range(1000):
            n = int(rng.integers(400, 16001))
            ref = rng.standard_normal(n)
            est = ref + 0.5 * rng.standard_normal(n)
            base = si_sdr(est, ref)
            fac = float(10.0 ** rng.uniform(-3, 3) * rng.choice([-1.0, 1.0]))
            worst_scale = max(worst_scale, abs(si_sdr(fac * est, ref) - base))
        assert worst_scale <= 1e-9

        worst_orth = 0.0
        for _ in range(200):
            n = int(rng.integers(1000, 16001))
            y = rng.standard_normal(n)
            z = rng.standard_normal(n)
            # two projection passes leave y.z at machine precision
            for _ in range(2):
                z = z - (z @ y) / (y @ y) * y
            a = float(10.0 ** rng.uniform(-2, 2) * rng.choice([-1.0, 1.0]))
            b = float(10.0 ** rng.uniform(-2, 2) * rng.choice([-1.0, 1.0]))
            got = si_sdr(a * y + b * z, y)
            want = 10.0 * math.log10((a * a * float(y @ y)) / (b * b * float(z @ z)))
            worst_orth = max(worst_orth, abs(got - want))
        assert worst_orth <= 1e-6

        for _ in range(50):
            n = int(rng.integers(1000, 8001))
            ref = rng.standard_normal(n)
            mix = ref + rng.standard_normal(n)
            assert si_sdri(mix, mix, ref) == 0.0
    assert TIMINGS["01"] < 10.0


def test_02_corruption_simulator_matches_bitmap_oracle():
    with timed("02"):
        rng = np.random.default_rng(22)
        geom = EncoderGeometry(kernel=320, stride=160, channels=1)
        for case in range(500):
            n = int(rng.integers(3200, 24001))
            y = 0.1 * rng.standard_normal(n)
            z = 0.1 * rng.standard_normal(n + int(rng.integers(0, 1600)))
            cfg = SimConfig(
                alpha=float(rng.uniform(0.2, 1.0)),
                beta=float(rng.uniform(0.0, 0.8)),
                n_max=int(rng.integers(1, 31)),
                g_ms=float(rng.choice([5.0, 10.0, 20.0, 40.0])),
            )
            sim = simulate_output(Waveform(y), Waveform(z), cfg, np.random.default_rng(1000 + case))

            assert sim.n_drawn <= cfg.n_max
            assert len(sim.spans) <= sim.n_drawn
            for sp, nxt in zip(sim.spans, sim.spans[1:]):
                assert sp.end < nxt.start  # merged output is disjoint and ordered

            bitmap = np.zeros(n, dtype=bool)
            for sp in sim.spans:
                assert 0 <= sp.start < sp.end <= n
                bitmap[sp.start : sp.end] = True
            blended = cfg.alpha * y + cfg.beta * z[:n]
            expect = np.where(bitmap, blended, y)
            assert np.array_equal(sim.output.samples, expect)

            n_frames = (n - geom.kernel) // geom.stride + 1
            covered = np.array(
                [bitmap[f * geom.stride : f * geom.stride + geom.kernel].sum() for f in range(n_frames)]
            )
            expect_labels = (2 * covered >= geom.kernel).astype(np.int8)
            assert np.array_equal(sim.labels, expect_labels)
    assert TIMINGS["02"] < 30.0


def test_03_worst_segment_matches_exhaustive_enumeration():
    with timed("03"):
        rng = np.random.default_rng(33)
        for _ in range(1000):
            n_frames = int(rng.integers(1, 400))
            # quantized scores make exact ties common
            p = rng.integers(0, 4, n_frames) / 3.0
            track = ScoreTrack(p)
            n_samples = int(rng.integers(1600, 64000))
            g_samples = int(rng.integers(1, n_samples + 1))

            got = find_worst_segment(track, g_samples, n_samples)

            w = max(1, int(math.floor(g_samples * n_frames / n_samples + 0.5)))
            conf = track.confidence
            best_i, best_sum = 0, None
            for i in range(n_frames - w + 1):
                s = conf[i : i + w].sum()
                if best_sum is None or s < best_sum:  # strict: first minimum wins ties
                    best_i, best_sum = i, s
            t = int(math.floor(best_i * n_samples / n_frames + 0.5))
            t = min(max(t, 0), n_samples - g_samples)
            assert got == SegmentSpan(t, t + g_samples)
    assert TIMINGS["03"] < 10.0


def _fd_relative_errors(params, loss_fn, h_base=1e-6):
    """Central finite differences vs autograd, one norm-ratio per tensor."""
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params)
    rels = []
    with torch.no_grad():
        for p, g in zip(params, grads):
            fd = torch.zeros_like(p)
            flat, fd_flat = p.view(-1), fd.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                h = h_base * max(1.0, abs(orig))
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                fd_flat[i] = (up - down) / (2.0 * h)
            diff = (fd - g).norm().item()
            denom = max(fd.norm().item(), g.norm().item(), 1e-12)
            rels.append(diff / denom)
    return rels


def test_04_gradient_checks_scorer_and_recovery():
    with timed("04"):
        torch.manual_seed(4)
        cfg = FcsConfig(
            encoder=EncoderGeometry(kernel=32, stride=16, channels=8),
            layers=1,
            heads=2,
            lr=1e-3,
            epochs=1,
            batch_size=2,
        )
        net = FcsNet(cfg).double()
        noise = torch.Generator().manual_seed(44)
        for p in net.parameters():
            if p.requires_grad:  # move off the zero-init saddle
                p.data += 0.05 * torch.randn(p.shape, generator=noise, dtype=p.dtype)
        x = torch.randn(2, 144, generator=noise, dtype=torch.float64)
        labels = (torch.rand(2, 8, generator=noise, dtype=torch.float64) < 0.3).double()
        params = [p for p in net.parameters() if p.requires_grad]
        rels = _fd_relative_errors(params, lambda: bce_loss_torch(net(x), labels))
        assert max(rels) < 1e-4, f"scorer BCE fd mismatch: {max(rels):.2e}"

        block = RecoveryBlock(8, 6, MarConfig(layers=1, heads=2, width=16, pool=2)).double()
        for p in block.parameters():
            p.data += 0.05 * torch.randn(p.shape, generator=noise, dtype=p.dtype)
        bx = torch.randn(2, 8, 10, generator=noise, dtype=torch.float64)
        bv = torch.randn(2, 6, 10, generator=noise, dtype=torch.float64)
        y_emb = torch.randn(2, 8, 10, generator=noise, dtype=torch.float64)
        y_wav = torch.randn(2, 40, generator=noise, dtype=torch.float64)
        dec_w = torch.randn(8, 1, 8, generator=noise, dtype=torch.float64)  # fixed decoder
        mask = mask_batch_tensor([SegmentSpan(8, 24), SegmentSpan(16, 40)], EncoderGeometry(8, 4, 8), 10).double()

        def mar_fn():
            x_hat = block(bx, bv)
            wav = torch.nn.functional.conv_transpose1d(x_hat, dec_w, stride=4).squeeze(1)[:, :40]
            return mar_loss(x_hat, y_emb, mask, wav, y_wav)[0]

        rels = _fd_relative_errors(list(block.parameters()), mar_fn)
        assert max(rels) < 1e-4, f"recovery loss fd mismatch: {max(rels):.2e}"
    assert TIMINGS["04"] < 120.0


# ------------------------------------------------------------- pipelines


def run_cli(*argv, timeout=2400):
    cmd = [sys.executable, "-m", "c2tse.cli", *map(str, argv)]
    t0 = time.monotonic()
    proc = subprocess.run(cmd, capture_output=True, text=True, timeout=timeout)
    dt = time.monotonic() - t0
    assert proc.returncode == 0, f"{argv[0]} failed after {dt:.0f}s:\n{proc.stderr[-3000:]}"
    return dt


def run_pipeline(root, ablation: bool):
    """Drive the CLI end to end under one seed; returns paths and timings."""
    t = {}
    corpus = root / "corpus"
    fcs_data = root / "fcs_data"
    fcs = root / "fcs"
    t["gen_corpus"] = run_cli("gen-corpus", "--out", corpus, "--seed", SEED)
    t["simulate"] = run_cli("simulate-fcs-data", "--corpus", corpus, "--out", fcs_data, "--seed", SEED + 1)
    t["train_fcs"] = run_cli("train-fcs", "--corpus", fcs_data, "--out", fcs, "--preset", "desk", "--seed", SEED + 2)
    t["pretrain"] = run_cli("pretrain", "--corpus", corpus, "--out", root / "pre", "--seed", SEED + 3)
    t["gf"] = run_cli(
        "finetune", "--corpus", corpus, "--checkpoint", root / "pre" / "vanilla.ckpt",
        "--out", root / "gf", "--stage", "global", "--seed", SEED + 4,
    )
    t["cf"] = run_cli(
        "finetune", "--corpus", corpus, "--checkpoint", root / "gf" / "global.ckpt",
        "--out", root / "cf", "--stage", "confidence", "--mode", "ss",
        "--fcs", fcs / "fcs.ckpt", "--seed", SEED + 5,
    )
    ckpts = {
        "vanilla": root / "pre" / "vanilla.ckpt",
        "gf": root / "gf" / "global.ckpt",
        "cf": root / "cf" / "confidence_ss.ckpt",
    }
    for name, ckpt in ckpts.items():
        t[f"eval_{name}"] = run_cli("evaluate", "--corpus", corpus, "--checkpoint", ckpt, "--out", root / f"eval_{name}")

    if ablation:
        t["train_fcs_subopt"] = run_cli(
            "train-fcs", "--corpus", fcs_data, "--out", root / "fcs_subopt",
            "--preset", "desk", "--epochs", 1, "--seed", SEED + 2,
        )
        t["cf_subopt"] = run_cli(
            "finetune", "--corpus", corpus, "--checkpoint", root / "gf" / "global.ckpt",
            "--out", root / "cf_subopt", "--stage", "confidence", "--mode", "ss",
            "--fcs", root / "fcs_subopt" / "fcs.ckpt", "--seed", SEED + 5,
        )
        ckpts["cf_subopt"] = root / "cf_subopt" / "confidence_ss.ckpt"
        t["eval_cf_subopt"] = run_cli(
            "evaluate", "--corpus", corpus, "--checkpoint", ckpts["cf_subopt"], "--out", root / "eval_cf_subopt"
        )
        t["chunk_study"] = run_cli(
            "chunk-study", "--corpus", corpus, "--checkpoint", ckpts["vanilla"],
            "--fcs", fcs / "fcs.ckpt", "--out", root / "chunks", "--seed", SEED + 6,
        )
    return {"root": root, "timings": t, "ckpts": ckpts}


def summary_of(pipe, name):
    with open(pipe["root"] / f"eval_{name}" / "summary.json") as fh:
        return json.load(fh)


@pytest.fixture(scope="module")
def pipe_a(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("pipe_a"), ablation=True)


@pytest.fixture(scope="module")
def pipe_b(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("pipe_b"), ablation=False)


# ---------------------------------------------------------------- 05-10


def test_05_scorer_auc_on_simulated_corpus(pipe_a):
    with open(pipe_a["root"] / "fcs" / "metrics.json") as fh:
        metrics = json.load(fh)
    TIMINGS["05"] = pipe_a["timings"]["train_fcs"]
    assert metrics["auc"] >= 0.90, f"held-out frame AUC {metrics['auc']:.4f}"
    assert TIMINGS["05"] < 600.0


def test_06_chunk_ordering_with_permutation_tests(pipe_a):
    with open(pipe_a["root"] / "chunks" / "chunk_study.json") as fh:
        reports = {r["chunk_ms"]: r for r in json.load(fh)["reports"]}
    TIMINGS["06"] = pipe_a["timings"]["chunk_study"]
    assert set(reports) == {200, 400, 600}
    for ms, rep in reports.items():
        m = rep["means_db"]
        assert rep["n_evaluated"] >= 200, f"{ms} ms: only {rep['n_evaluated']} utterances survived"
        assert m["unreliable"] < m["random"] <= m["reliable"], f"{ms} ms ordering broke: {m}"
        assert rep["p_unreliable_vs_reliable"] < 0.01
        assert rep["p_unreliable_vs_random"] < 0.01
    assert TIMINGS["06"] < 300.0


def test_07_finetuning_gains_vanilla_gf_cf(pipe_a):
    t = pipe_a["timings"]
    TIMINGS["07"] = sum(t[k] for k in ("pretrain", "gf", "cf", "eval_vanilla", "eval_gf", "eval_cf"))
    van = summary_of(pipe_a, "vanilla")["mean_si_sdri_db"]
    gf = summary_of(pipe_a, "gf")["mean_si_sdri_db"]
    cf = summary_of(pipe_a, "cf")["mean_si_sdri_db"]
    assert gf - van >= 0.1, f"global fine-tuning gained {gf - van:+.3f} dB over vanilla ({van:.3f})"
    assert cf - gf >= 0.0, f"confidence fine-tuning gained {cf - gf:+.3f} dB over global ({gf:.3f})"
    assert TIMINGS["07"] < 1800.0


def test_08_suboptimal_scorer_ablation(pipe_a):
    t = pipe_a["timings"]
    TIMINGS["08"] = sum(t[k] for k in ("train_fcs_subopt", "cf_subopt", "eval_cf_subopt"))
    van = summary_of(pipe_a, "vanilla")["mean_si_sdri_db"]
    cf = summary_of(pipe_a, "cf")["mean_si_sdri_db"]
    sub = summary_of(pipe_a, "cf_subopt")["mean_si_sdri_db"]
    assert sub - van < cf - van, f"1-epoch scorer gain {sub - van:+.3f} not below full-scorer gain {cf - van:+.3f}"
    assert sub >= van, f"1-epoch scorer fell below vanilla: {sub:.3f} vs {van:.3f}"
    assert TIMINGS["08"] < 1800.0


def test_09_freeze_audits_and_lifecycle_rejection(pipe_a):
    from c2tse.backbone import BackboneState, MixCorpus
    from c2tse.finetune import FinetuneConfig, stage1_global, stage2_ss

    with timed("09"):
        for run in ("gf", "cf", "cf_subopt"):
            with open(pipe_a["root"] / run / "freeze_audit.json") as fh:
                audit = json.load(fh)
            assert audit["ok"] is True, f"{run} freeze audit: {audit}"
            if run != "gf":  # confidence stages must hold the scorer bit-still
                assert audit["fcs"]["frozen_params"] > 0
                assert audit["fcs"]["changed_frozen"] == []

        corpus = MixCorpus(pipe_a["root"] / "corpus")
        cfg = FinetuneConfig()
        vanilla = BackboneState.load(pipe_a["ckpts"]["vanilla"])
        with pytest.raises(LifecycleError):
            stage2_ss(vanilla, corpus, cfg, None, seed=1)  # confidence before global
        gf = BackboneState.load(pipe_a["ckpts"]["gf"])
        with pytest.raises(LifecycleError):
            stage1_global(gf, corpus, cfg, seed=1)  # global twice
        cf = BackboneState.load(pipe_a["ckpts"]["cf"])
        with pytest.raises(LifecycleError):
            stage1_global(cf, corpus, cfg, seed=1)  # backwards from confidence
    assert TIMINGS["09"] < 60.0


def test_10_pipeline_determinism(pipe_a, pipe_b):
    TIMINGS["10"] = sum(pipe_b["timings"].values())
    for name in ("vanilla", "gf", "cf"):
        sa, sb = summary_of(pipe_a, name), summary_of(pipe_b, name)
        for key in ("mean_si_sdr_db", "mean_si_sdri_db"):
            assert abs(sa[key] - sb[key]) <= 1e-6, f"{name}/{key}: {sa[key]!r} vs {sb[key]!r}"
        assert sa["checkpoint_hash"] == sb["checkpoint_hash"], f"{name} checkpoints diverged"
