"""Two-stage fine-tuning of the extractor with mask-and-recover training.

Stage 1 ("global") attaches the recovery block and trains the whole network
to fill randomly silenced input spans. Stage 2 ("confidence") replaces the
random spans with the least-confident span found by the frozen confidence
scorer on the model's own output, in one of three modes: ss keeps the MAR
objective on self-selected spans; s_full supervises the located span
directly on waveform SI-SDR; s_adapter does the same while training only a
small adapter conv. Every stage selects the best epoch by validation SI-SDR,
with the stage-entry weights competing as epoch 0.
"""
from __future__ import annotations

import dataclasses

import numpy as np
import torch

from .audio import SegmentSpan
from .backbone import BackboneState, MixCorpus, split_means, batch_tensors
from .errors import ConfigError, LifecycleError
from .fcs import FcsModel
from .mar import MarConfig, mask_batch_tensor, mar_loss, target_embedding
from .nets import si_sdr_torch
from .tracks import ScoreTrack, find_worst_segment
from .util import derive_rng

CONFIDENCE_MODES = ("ss", "s_full", "s_adapter")


@dataclasses.dataclass(frozen=True)
class FinetuneConfig:
    """Spans, learning rate, epoch budget and MAR block settings."""

    g_ms: float = 300.0
    lr: float = 15e-5
    epochs_global: int = 15
    epochs_confidence: int = 10
    batch_size: int = 8
    mar: MarConfig = dataclasses.field(default_factory=MarConfig)
    silent_span_ms: float = 50.0

    def __post_init__(self):
        if self.g_samples < 1:
            raise ConfigError(f"chunk of {self.g_ms} ms is shorter than one sample")
        if self.lr <= 0 or self.epochs_global < 1 or self.epochs_confidence < 1 or self.batch_size < 1:
            raise ConfigError("bad fine-tuning parameters")

    @property
    def g_samples(self) -> int:
        return int(round(self.g_ms * 16))

    @property
    def weights(self):
        return (self.mar.theta, self.mar.delta, self.mar.lam)


def span_below_power_floor(ref: torch.Tensor, span: SegmentSpan, floor_ms: float = 50.0) -> bool:
    """True when the reference span holds less energy than floor_ms of the
    utterance's mean power; such spans carry no usable supervision signal."""
    span_energy = float((ref[span.start : span.end] ** 2).sum())
    mean_power = float((ref**2).mean())
    return span_energy < mean_power * floor_ms * 16.0


def param_snapshot(module: torch.nn.Module) -> dict:
    return {name: p.detach().cpu().numpy().copy() for name, p in module.named_parameters()}


def audit_frozen(before: dict, module: torch.nn.Module, frozen_names) -> dict:
    """Byte-compare the frozen parameter set before/after a stage."""
    now = param_snapshot(module)
    changed = [n for n in frozen_names if not np.array_equal(before[n], now[n])]
    return {
        "frozen_params": len(list(frozen_names)),
        "changed_frozen": changed,
        "ok": not changed,
    }


class _BestTracker:
    """Keeps the state dict with the highest validation score seen so far.

    The entry state is candidate zero, so a stage that never improves falls
    back to exactly what it started from.
    """

    def __init__(self, net: torch.nn.Module, entry_val: float, entry_step: int):
        self.best_val = entry_val
        self.best_state = {k: v.clone() for k, v in net.state_dict().items()}
        self.best_epoch = 0
        self.best_step = entry_step

    def consider(self, epoch: int, val: float, net: torch.nn.Module, step: int) -> bool:
        if val > self.best_val:
            self.best_val = val
            self.best_state = {k: v.clone() for k, v in net.state_dict().items()}
            self.best_epoch = epoch
            self.best_step = step
            return True
        return False

    def restore(self, net: torch.nn.Module) -> dict:
        net.load_state_dict(self.best_state)
        return {"best_epoch": self.best_epoch, "best_val_si_sdr_db": round(self.best_val, 4), "step": self.best_step}


def _mask_spans(x: torch.Tensor, spans) -> torch.Tensor:
    out = x.clone()
    for i, sp in enumerate(spans):
        out[i, sp.start : sp.end] = 0.0
    return out


def _fcs_spans(fcs_model: FcsModel, est: np.ndarray, g_samples: int) -> list:
    """Least-confident span per utterance of a batch of outputs."""
    t_len = est.shape[-1]
    probs = fcs_model.predict_batch(est)
    frame_ms = fcs_model.cfg.encoder.stride / 16.0
    return [
        find_worst_segment(ScoreTrack(np.clip(p, 0.0, 1.0), frame_ms=frame_ms), g_samples, t_len)
        for p in probs
    ]


def stage1_global(state: BackboneState, corpus: MixCorpus, cfg: FinetuneConfig, seed: int):
    """Global fine-tuning: random span masking with the MAR objective.

    Attaches the recovery block (identity at init), then trains every
    parameter. Each training item gets one uniformly placed silenced span of
    cfg.g_ms; the loss pulls the recovered embedding towards the clean
    target's embedding on and off the span and keeps the decoded waveform
    close in SI-SDR.

    Returns:
        (state, log_rows, audit) with state.stage == "global".
    """
    if state.stage != "vanilla":
        raise LifecycleError(f"global fine-tuning needs a vanilla model, got {state.stage!r}")
    state.advance("global")
    block_seed = int(derive_rng(seed, 41).integers(0, 2**31))
    state.net.attach_recovery(cfg.mar, block_seed)

    return _run_mar_stage(state, corpus, cfg, seed, epochs=cfg.epochs_global, fcs_model=None)


def stage2_ss(state: BackboneState, corpus: MixCorpus, cfg: FinetuneConfig, fcs_model: FcsModel, seed: int):
    """Confidence fine-tuning, self-supervised mode.

    Pass 1 extracts with the current model (no grad, recovery included); the
    frozen scorer locates the least-confident span of that output; pass 2
    trains with that span silenced under the same MAR objective as stage 1.

    Returns:
        (state, log_rows, audit); the audit certifies the scorer was
        untouched bit for bit.
    """
    if state.stage != "global":
        raise LifecycleError(f"confidence fine-tuning needs a global model, got {state.stage!r}")
    state.advance("confidence", "ss")
    return _run_mar_stage(state, corpus, cfg, seed, epochs=cfg.epochs_confidence, fcs_model=fcs_model)


def _run_mar_stage(state, corpus, cfg, seed, *, epochs, fcs_model):
    train_rows = corpus.rows("train")
    val_rows = corpus.rows("val")
    if not train_rows or not val_rows:
        raise ConfigError("corpus needs train and val splits")
    net = state.net
    geom = state.cfg.encoder
    g = cfg.g_samples
    rng = derive_rng(seed, 43)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)

    fcs_before = param_snapshot(fcs_model.net) if fcs_model is not None else None

    entry = split_means(state, corpus, val_rows, cfg.batch_size)
    tracker = _BestTracker(net, entry["si_sdr_db"], state.step)
    log = [{"epoch": 0, "val_si_sdr_db": round(entry["si_sdr_db"], 4), "val_si_sdri_db": round(entry["si_sdri_db"], 4)}]

    step = state.step
    for epoch in range(1, epochs + 1):
        net.train()
        order = rng.permutation(len(train_rows))
        sums = {"total": 0.0, "mse_masked": 0.0, "mse_unmasked": 0.0, "neg_si_sdr": 0.0}
        n_batches = 0
        for lo in range(0, len(order), cfg.batch_size):
            rows = [train_rows[i] for i in order[lo : lo + cfg.batch_size]]
            x, y, cue = batch_tensors(corpus, rows)
            t_len = x.shape[-1]
            if g >= t_len:
                raise ConfigError(f"span of {g} samples does not fit utterances of {t_len}")
            if fcs_model is None:
                spans = [SegmentSpan(int(s), int(s) + g) for s in rng.integers(0, t_len - g + 1, size=x.shape[0])]
            else:
                with torch.no_grad():
                    est = net(x, cue).y_hat.numpy().astype(np.float64)
                spans = _fcs_spans(fcs_model, est, g)
            out = net(_mask_spans(x, spans), cue)
            y_emb = target_embedding(net.encoder, y)
            mask = mask_batch_tensor(spans, geom, out.x.shape[-1])
            loss, parts = mar_loss(out.x_hat, y_emb, mask, out.y_hat, y, cfg.weights)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            sums["total"] += float(loss.detach())
            for k in parts:
                sums[k] += parts[k]
            n_batches += 1
        if not np.isfinite(sums["total"]):
            raise RuntimeError(f"stage {state.stage!r} diverged at epoch {epoch}")
        val = split_means(state, corpus, val_rows, cfg.batch_size)
        tracker.consider(epoch, val["si_sdr_db"], net, step)
        log.append(
            {
                "epoch": epoch,
                "train_total": round(sums["total"] / n_batches, 4),
                "train_mse_masked": round(sums["mse_masked"] / n_batches, 6),
                "train_mse_unmasked": round(sums["mse_unmasked"] / n_batches, 6),
                "train_neg_si_sdr": round(sums["neg_si_sdr"] / n_batches, 4),
                "val_si_sdr_db": round(val["si_sdr_db"], 4),
                "val_si_sdri_db": round(val["si_sdri_db"], 4),
            }
        )

    summary = tracker.restore(net)
    state.step = tracker.best_step
    log.append({"epoch": "best", **summary})

    audit = {"stage": state.stage, "mode": state.mode, "backbone_frozen": [], "ok": True}
    if fcs_before is not None:
        fcs_audit = audit_frozen(fcs_before, fcs_model.net, list(fcs_before))
        audit["fcs"] = fcs_audit
        audit["ok"] = fcs_audit["ok"]
    return state, log, audit


def stage2_supervised(
    state: BackboneState,
    corpus: MixCorpus,
    cfg: FinetuneConfig,
    fcs_model: FcsModel,
    seed: int,
    adapter_only: bool = False,
):
    """Confidence fine-tuning with span-reweighted waveform supervision.

    One intact forward per batch; the frozen scorer picks the worst span of
    the (detached) output, and the loss is theta * (-SI-SDR on the span) +
    delta * (-SI-SDR on the concatenated remainder). Spans whose reference
    holds less energy than 50 ms of the utterance's mean power are skipped
    and counted: the off-span term alone drives those items. With
    adapter_only a dirac-initialised conv between recovery and decoder is
    the only trainable module; everything else is audited bit-identical.

    Returns:
        (state, log_rows, audit).
    """
    if state.stage != "global":
        raise LifecycleError(f"confidence fine-tuning needs a global model, got {state.stage!r}")
    state.advance("confidence", "s_adapter" if adapter_only else "s_full")

    train_rows = corpus.rows("train")
    val_rows = corpus.rows("val")
    if not train_rows or not val_rows:
        raise ConfigError("corpus needs train and val splits")
    net = state.net
    g = cfg.g_samples
    theta, delta, _ = cfg.weights

    if adapter_only:
        net.attach_adapter()
        for name, p in net.named_parameters():
            p.requires_grad = name.startswith("adapter.")
        trainable = list(net.adapter.parameters())
        frozen_names = [n for n, _ in net.named_parameters() if not n.startswith("adapter.")]
    else:
        trainable = list(net.parameters())
        frozen_names = []
    before = param_snapshot(net)
    fcs_before = param_snapshot(fcs_model.net)

    rng = derive_rng(seed, 47)
    opt = torch.optim.Adam(trainable, lr=cfg.lr)
    entry = split_means(state, corpus, val_rows, cfg.batch_size)
    tracker = _BestTracker(net, entry["si_sdr_db"], state.step)
    log = [{"epoch": 0, "val_si_sdr_db": round(entry["si_sdr_db"], 4), "val_si_sdri_db": round(entry["si_sdri_db"], 4)}]

    step = state.step
    for epoch in range(1, cfg.epochs_confidence + 1):
        net.train()
        order = rng.permutation(len(train_rows))
        total = 0.0
        n_batches = 0
        skipped = 0
        for lo in range(0, len(order), cfg.batch_size):
            rows = [train_rows[i] for i in order[lo : lo + cfg.batch_size]]
            x, y, cue = batch_tensors(corpus, rows)
            t_len = x.shape[-1]
            if g >= t_len:
                raise ConfigError(f"span of {g} samples does not fit utterances of {t_len}")
            out = net(x, cue)
            spans = _fcs_spans(fcs_model, out.y_hat.detach().numpy().astype(np.float64), g)
            item_losses = []
            for i, sp in enumerate(spans):
                ref = y[i]
                est = out.y_hat[i]
                ref_off = torch.cat([ref[: sp.start], ref[sp.end :]]).unsqueeze(0)
                est_off = torch.cat([est[: sp.start], est[sp.end :]]).unsqueeze(0)
                loss_i = delta * (-si_sdr_torch(est_off, ref_off)[0])
                if span_below_power_floor(ref, sp, cfg.silent_span_ms):
                    skipped += 1
                else:
                    ref_on = ref[sp.start : sp.end].unsqueeze(0)
                    est_on = est[sp.start : sp.end].unsqueeze(0)
                    loss_i = loss_i + theta * (-si_sdr_torch(est_on, ref_on)[0])
                item_losses.append(loss_i)
            loss = torch.stack(item_losses).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            total += float(loss.detach())
            n_batches += 1
        if not np.isfinite(total):
            raise RuntimeError(f"stage {state.stage!r}/{state.mode!r} diverged at epoch {epoch}")
        val = split_means(state, corpus, val_rows, cfg.batch_size)
        tracker.consider(epoch, val["si_sdr_db"], net, step)
        log.append(
            {
                "epoch": epoch,
                "train_total": round(total / n_batches, 4),
                "skipped_spans": skipped,
                "val_si_sdr_db": round(val["si_sdr_db"], 4),
                "val_si_sdri_db": round(val["si_sdri_db"], 4),
            }
        )

    summary = tracker.restore(net)
    state.step = tracker.best_step
    log.append({"epoch": "best", **summary})
    for p in net.parameters():
        p.requires_grad = True

    backbone_audit = audit_frozen(before, net, frozen_names)
    fcs_audit = audit_frozen(fcs_before, fcs_model.net, list(fcs_before))
    audit = {
        "stage": state.stage,
        "mode": state.mode,
        "backbone_frozen": frozen_names,
        "backbone": backbone_audit,
        "fcs": fcs_audit,
        "ok": backbone_audit["ok"] and fcs_audit["ok"],
    }
    return state, log, audit
