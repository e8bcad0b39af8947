"""Toy time-domain target speaker extractor and its corpus plumbing.

A linear strided conv encoder lifts the mixture to a 64-channel frame
representation; a small dilated TCN conditioned on the upsampled cue
predicts a sigmoid mask; the masked representation goes through an optional
recovery block (attached for fine-tuning), an optional adapter conv, and a
transposed-conv decoder back to the waveform. Deliberately small: the point
is to exercise the confidence-guided training loop on one CPU core, not to
compete with full separators.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import EncoderGeometry, Waveform, frame_count, read_wav
from .checkpoint import compute_content_hash, load_checkpoint, save_checkpoint
from .cues import corrupt_cue, CueTrack, load_cue
from .errors import CheckpointError, ConfigError, LifecycleError, ShapeError
from .mar import MarConfig, RecoveryBlock
from .metrics import sdr_plain, si_sdr, si_sdri
from .nets import si_sdr_torch
from .util import derive_rng, read_jsonl

STAGE_ORDER = {"init": 0, "vanilla": 1, "global": 2, "confidence": 3}
_CUE_SALT = 31
_TRAIN_SALT = 23


@dataclasses.dataclass(frozen=True)
class BackboneConfig:
    """Sizes of the toy extractor."""

    encoder: EncoderGeometry = EncoderGeometry(kernel=40, stride=20, channels=64)
    hidden: int = 64
    repeats: int = 2
    blocks: int = 4  # dilations 1, 2, 4, ... per repeat
    cue_dim: int = 20
    cue_channels: int = 16

    def __post_init__(self):
        if min(self.hidden, self.repeats, self.blocks, self.cue_dim, self.cue_channels) < 1:
            raise ConfigError("backbone sizes must be positive")

    @classmethod
    def desk(cls) -> "BackboneConfig":
        return cls()

    def to_dict(self) -> dict:
        return {
            "kernel": self.encoder.kernel,
            "stride": self.encoder.stride,
            "channels": self.encoder.channels,
            "hidden": self.hidden,
            "repeats": self.repeats,
            "blocks": self.blocks,
            "cue_dim": self.cue_dim,
            "cue_channels": self.cue_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(
            encoder=EncoderGeometry(d["kernel"], d["stride"], d["channels"]),
            hidden=d["hidden"],
            repeats=d["repeats"],
            blocks=d["blocks"],
            cue_dim=d["cue_dim"],
            cue_channels=d["cue_channels"],
        )


class TcnBlock(nn.Module):
    """Dilated depthwise-separable residual block (gLN-style norms)."""

    def __init__(self, channels: int, hidden: int, dilation: int):
        super().__init__()
        self.expand = nn.Conv1d(channels, hidden, 1)
        self.act1 = nn.PReLU()
        self.norm1 = nn.GroupNorm(1, hidden)
        self.depthwise = nn.Conv1d(hidden, hidden, 3, padding=dilation, dilation=dilation, groups=hidden)
        self.act2 = nn.PReLU()
        self.norm2 = nn.GroupNorm(1, hidden)
        self.project = nn.Conv1d(hidden, channels, 1)

    def forward(self, h):
        out = self.norm1(self.act1(self.expand(h)))
        out = self.norm2(self.act2(self.depthwise(out)))
        return h + self.project(out)


@dataclasses.dataclass
class BackboneOutput:
    """Everything one forward pass yields."""

    y_hat: torch.Tensor  # (B, T) decoded estimate
    x: torch.Tensor  # (B, C, F) masked mixture embedding
    x_hat: torch.Tensor  # (B, C, F) after recovery (== x without one)
    v: torch.Tensor  # (B, Cv, F) refined cue embedding


class ExtractionBackbone(nn.Module):
    """Mask-based extractor with optional recovery block and adapter."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        geom = cfg.encoder
        self.encoder = nn.Conv1d(1, geom.channels, geom.kernel, stride=geom.stride, bias=False)
        self.cue_proj = nn.Linear(cfg.cue_dim, cfg.cue_channels)
        self.v_refine = nn.Conv1d(cfg.cue_channels, cfg.cue_channels, 1)
        self.bottleneck = nn.Conv1d(geom.channels + cfg.cue_channels, cfg.hidden, 1)
        self.blocks = nn.ModuleList(
            TcnBlock(cfg.hidden, cfg.hidden, 2**b) for _ in range(cfg.repeats) for b in range(cfg.blocks)
        )
        self.mask_conv = nn.Conv1d(cfg.hidden, geom.channels, 1)
        self.decoder = nn.ConvTranspose1d(geom.channels, 1, geom.kernel, stride=geom.stride, bias=False)
        self.recovery: RecoveryBlock | None = None
        self.adapter: nn.Conv1d | None = None
        self.recovery_cfg: MarConfig | None = None

    def attach_recovery(self, mar_cfg: MarConfig, seed: int) -> None:
        if self.recovery is not None:
            raise LifecycleError("recovery block already attached")
        torch.manual_seed(seed)
        self.recovery = RecoveryBlock(self.cfg.encoder.channels, self.cfg.cue_channels, mar_cfg)
        self.recovery_cfg = mar_cfg

    def attach_adapter(self) -> None:
        """Identity-initialised 1-D conv between recovery and decoder."""
        if self.adapter is not None:
            raise LifecycleError("adapter already attached")
        conv = nn.Conv1d(self.cfg.encoder.channels, self.cfg.encoder.channels, 3, padding=1)
        nn.init.dirac_(conv.weight)
        nn.init.zeros_(conv.bias)
        self.adapter = conv

    def upsample_cue(self, v: torch.Tensor, n_frames: int) -> torch.Tensor:
        # v: (B, Cv, n_cue) -> nearest-neighbour to (B, Cv, n_frames)
        n_cue = v.shape[-1]
        idx = torch.div(torch.arange(n_frames, device=v.device) * n_cue, n_frames, rounding_mode="floor")
        return v[:, :, idx.clamp(max=n_cue - 1)]

    def forward(self, x: torch.Tensor, cue: torch.Tensor) -> BackboneOutput:
        # x: (B, T); cue: (B, n_cue, cue_dim)
        t_len = x.shape[-1]
        n_cue = cue.shape[1]
        if abs(n_cue - t_len // 640) > 1:
            raise ShapeError(f"cue of {n_cue} frames does not cover {t_len} samples at 25 Hz")
        mix = self.encoder(x.unsqueeze(1))  # (B, C, F)
        n_frames = mix.shape[-1]

        v = self.cue_proj(cue).transpose(1, 2)  # (B, Cv, n_cue)
        v = self.v_refine(self.upsample_cue(v, n_frames))  # (B, Cv, F)

        h = self.bottleneck(torch.cat([mix, v], dim=1))
        for block in self.blocks:
            h = block(h)
        mask = torch.sigmoid(self.mask_conv(h))
        x_emb = mask * mix

        x_hat = self.recovery(x_emb, v) if self.recovery is not None else x_emb
        d = self.adapter(x_hat) if self.adapter is not None else x_hat
        y_hat = self.decoder(d).squeeze(1)  # (B, (F-1)*stride + kernel)
        if y_hat.shape[-1] < t_len:
            y_hat = F.pad(y_hat, (0, t_len - y_hat.shape[-1]))
        else:
            y_hat = y_hat[:, :t_len]
        return BackboneOutput(y_hat, x_emb, x_hat, v)


@dataclasses.dataclass
class BackboneState:
    """Extractor plus lifecycle bookkeeping (stage, lineage, step count)."""

    cfg: BackboneConfig
    net: ExtractionBackbone
    stage: str = "init"
    mode: str | None = None
    step: int = 0
    seed: int | None = None
    parent_hash: str | None = None
    lineage: list = field(default_factory=list)

    kind = "backbone"

    @classmethod
    def new(cls, cfg: BackboneConfig, seed: int) -> "BackboneState":
        torch.manual_seed(seed)
        return cls(cfg, ExtractionBackbone(cfg), seed=seed)

    def config_dict(self) -> dict:
        return {
            "backbone": self.cfg.to_dict(),
            "mar": None if self.net.recovery_cfg is None else self.net.recovery_cfg.to_dict(),
            "adapter": self.net.adapter is not None,
        }

    def state_arrays(self) -> dict:
        return {name: t.detach().cpu().numpy().copy() for name, t in self.net.state_dict().items()}

    def content_hash(self) -> str:
        return compute_content_hash(
            self.kind, self.config_dict(), self.state_arrays(), stage=self.stage, mode=self.mode, step=self.step
        )

    def advance(self, stage: str, mode: str | None = None) -> None:
        """Move to the next lifecycle stage; anything else is an error."""
        if stage not in STAGE_ORDER:
            raise ConfigError(f"unknown stage {stage!r}")
        if STAGE_ORDER[stage] != STAGE_ORDER[self.stage] + 1:
            raise LifecycleError(f"cannot enter stage {stage!r} from {self.stage!r}")
        entry = {"stage": self.stage, "mode": self.mode, "hash": self.content_hash(), "seed": self.seed, "step": self.step}
        self.lineage = self.lineage + [entry]
        self.parent_hash = entry["hash"]
        self.stage = stage
        self.mode = mode

    def save(self, path) -> str:
        return save_checkpoint(
            path,
            self.kind,
            self.config_dict(),
            self.state_arrays(),
            stage=self.stage,
            mode=self.mode,
            step=self.step,
            seed=self.seed,
            parent_hash=self.parent_hash,
            lineage=self.lineage,
        )

    @classmethod
    def load(cls, path) -> "BackboneState":
        ckpt = load_checkpoint(path)
        if ckpt.kind != cls.kind:
            raise CheckpointError(f"{path}: kind {ckpt.kind!r}, expected {cls.kind!r}")
        cfg = BackboneConfig.from_dict(ckpt.config["backbone"])
        net = ExtractionBackbone(cfg)
        if ckpt.config.get("mar") is not None:
            net.attach_recovery(MarConfig.from_dict(ckpt.config["mar"]), seed=0)
        if ckpt.config.get("adapter"):
            net.attach_adapter()
        net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in ckpt.arrays.items()})
        return cls(
            cfg,
            net,
            stage=ckpt.stage,
            mode=ckpt.mode,
            step=ckpt.step,
            seed=ckpt.seed,
            parent_hash=ckpt.parent_hash,
            lineage=list(ckpt.lineage),
        )


class MixCorpus:
    """Manifest-backed mixture corpus; rows are loaded lazily per batch."""

    def __init__(self, root):
        self.root = str(root)
        manifest = os.path.join(self.root, "manifest.jsonl")
        try:
            self._rows = list(read_jsonl(manifest))
        except OSError as exc:
            raise ConfigError(f"cannot read corpus manifest {manifest}: {exc}") from exc
        if not self._rows:
            raise ConfigError(f"empty corpus manifest {manifest}")

    def rows(self, split: str) -> list[dict]:
        return [r for r in self._rows if r["split"] == split]

    def splits(self) -> dict:
        out: dict = {}
        for r in self._rows:
            out[r["split"]] = out.get(r["split"], 0) + 1
        return out

    def _path(self, rel: str) -> str:
        return os.path.join(self.root, rel)

    def load_target(self, row) -> Waveform:
        return read_wav(self._path(row["target_path"]))

    def load_mixture(self, row) -> Waveform:
        return read_wav(self._path(row["mixture_path"]))

    def load_interferer(self, row) -> Waveform:
        return read_wav(self._path(row["interferer_path"]))

    def load_cue(self, row) -> CueTrack:
        return load_cue(self._path(row["cue_path"]))


def batch_tensors(corpus: MixCorpus, rows, cue_mode=None, severity: float = 0.0, cue_rng_seed=None):
    """(mixture, target, cue) float32 tensors for a list of manifest rows.

    Optional cue corruption is applied per row with an rng derived from
    (cue_rng_seed, row id), so evaluation conditions are reproducible.
    """
    xs, ys, cs = [], [], []
    for row in rows:
        xs.append(corpus.load_mixture(row).samples.astype(np.float32))
        ys.append(corpus.load_target(row).samples.astype(np.float32))
        cue = corpus.load_cue(row)
        if cue_mode is not None and severity > 0.0:
            rng = derive_rng(cue_rng_seed or 0, _CUE_SALT, int(row["id"][3:]))
            cue = corrupt_cue(cue, cue_mode, severity, rng)
        cs.append(cue.frames.astype(np.float32))
    return (
        torch.from_numpy(np.stack(xs)),
        torch.from_numpy(np.stack(ys)),
        torch.from_numpy(np.stack(cs)),
    )


def pretrain(
    state: BackboneState,
    corpus: MixCorpus,
    *,
    epochs: int = 12,
    lr: float = 1e-3,
    warmup_steps: int = 300,
    warmup_lr: float = 1e-2,
    batch_size: int = 8,
) -> tuple:
    """Vanilla training: reconstruction warm-up, then SI-SDR maximisation.

    The warm-up fits decoder(encoder(y)) to y on clean targets so the
    encoder/decoder pair starts near-invertible. Plain MSE is used there
    on purpose: the scale-invariant ratio loss flattens out once the
    reconstruction is merely correlated, while MSE keeps pushing the
    residual down. The main loop then trains the full extractor with
    -SI-SDR on mixtures. Model selection is by mean validation SI-SDR.

    Returns:
        (state, log_rows); the state's stage becomes "vanilla".
    """
    if state.stage != "init":
        raise LifecycleError(f"pretraining expects a fresh model, got stage {state.stage!r}")
    if epochs < 0 or warmup_steps < 0:
        raise ConfigError("epochs and warmup_steps must be >= 0")
    train_rows = corpus.rows("train")
    val_rows = corpus.rows("val")
    if not train_rows or not val_rows:
        raise ConfigError("corpus needs train and val splits")
    state.advance("vanilla")  # records the untrained snapshot in the lineage
    rng = derive_rng(state.seed or 0, _TRAIN_SALT)
    net = state.net
    log = []

    if warmup_steps > 0:
        opt = torch.optim.Adam(list(net.encoder.parameters()) + list(net.decoder.parameters()), lr=warmup_lr)
        net.train()
        done = 0
        while done < warmup_steps:
            order = rng.permutation(len(train_rows))
            for lo in range(0, len(order), batch_size):
                if done >= warmup_steps:
                    break
                rows = [train_rows[i] for i in order[lo : lo + batch_size]]
                _, y, _ = batch_tensors(corpus, rows)
                recon = net.decoder(net.encoder(y.unsqueeze(1))).squeeze(1)
                recon = F.pad(recon, (0, y.shape[-1] - recon.shape[-1]))
                loss = F.mse_loss(recon, y)
                opt.zero_grad()
                loss.backward()
                opt.step()
                done += 1
        with torch.no_grad():
            _, yv, _ = batch_tensors(corpus, val_rows[: min(len(val_rows), 16)])
            recon = net.decoder(net.encoder(yv.unsqueeze(1))).squeeze(1)
            recon = F.pad(recon, (0, yv.shape[-1] - recon.shape[-1]))
            recon_db = float(si_sdr_torch(recon, yv).mean())
        log.append({"phase": "warmup", "steps": warmup_steps, "recon_si_sdr_db": round(recon_db, 3)})

    opt = torch.optim.Adam(net.parameters(), lr=lr)
    best = {"val": -np.inf, "state": None, "epoch": -1, "step": 0}
    step = 0
    for epoch in range(1, epochs + 1):
        net.train()
        order = rng.permutation(len(train_rows))
        losses = []
        for lo in range(0, len(order), batch_size):
            rows = [train_rows[i] for i in order[lo : lo + batch_size]]
            x, y, cue = batch_tensors(corpus, rows)
            out = net(x, cue)
            loss = -si_sdr_torch(out.y_hat, y).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            losses.append(float(loss.detach()))
        train_loss = float(np.mean(losses))
        if not np.isfinite(train_loss):
            raise RuntimeError(f"pretraining diverged at epoch {epoch}")
        val_stats = split_means(state, corpus, val_rows, batch_size)
        log.append(
            {
                "epoch": epoch,
                "train_neg_si_sdr": round(train_loss, 4),
                "val_si_sdr_db": round(val_stats["si_sdr_db"], 4),
                "val_si_sdri_db": round(val_stats["si_sdri_db"], 4),
            }
        )
        if val_stats["si_sdr_db"] > best["val"]:
            best = {
                "val": val_stats["si_sdr_db"],
                "state": {k: v.clone() for k, v in net.state_dict().items()},
                "epoch": epoch,
                "step": step,
            }
    if best["state"] is not None:
        net.load_state_dict(best["state"])
        log.append({"epoch": "best", "best_epoch": best["epoch"], "val_si_sdr_db": round(best["val"], 4)})
    state.step = best["step"]
    return state, log


@torch.no_grad()
def run_extraction(state: BackboneState, corpus: MixCorpus, rows, *, cue_mode=None, severity=0.0, seed=0, batch_size=8):
    """Yield (row, est np.float64) for each manifest row."""
    state.net.eval()
    for lo in range(0, len(rows), batch_size):
        chunk = rows[lo : lo + batch_size]
        x, _, cue = batch_tensors(corpus, chunk, cue_mode=cue_mode, severity=severity, cue_rng_seed=seed)
        out = state.net(x, cue)
        est = out.y_hat.numpy().astype(np.float64)
        for row, e in zip(chunk, est):
            yield row, e


def split_means(state, corpus, rows, batch_size) -> dict:
    """Mean SI-SDR / SI-SDRi over a list of manifest rows."""
    vals, imps = [], []
    for row, est in run_extraction(state, corpus, rows, batch_size=batch_size):
        ref = corpus.load_target(row)
        mix = corpus.load_mixture(row)
        vals.append(si_sdr(est, ref))
        imps.append(si_sdri(est, mix, ref))
    return {"si_sdr_db": float(np.mean(vals)), "si_sdri_db": float(np.mean(imps))}


def evaluate_extraction(
    state: BackboneState,
    corpus: MixCorpus,
    split: str = "test",
    *,
    cue_mode=None,
    severity: float = 0.0,
    seed: int = 0,
    batch_size: int = 8,
) -> tuple:
    """Per-utterance and mean extraction quality on one split.

    Returns:
        (rows, summary): rows have id / si_sdr_db / si_sdri_db / sdr_db;
        summary carries the means, the count, the stage tag and the
        checkpoint hash, plus the cue condition used.
    """
    eval_rows = corpus.rows(split)
    if not eval_rows:
        raise ConfigError(f"no rows with split {split!r}")
    out_rows = []
    for row, est in run_extraction(state, corpus, eval_rows, cue_mode=cue_mode, severity=severity, seed=seed, batch_size=batch_size):
        ref = corpus.load_target(row)
        mix = corpus.load_mixture(row)
        out_rows.append(
            {
                "id": row["id"],
                "si_sdr_db": si_sdr(est, ref),
                "si_sdri_db": si_sdri(est, mix, ref),
                "sdr_db": sdr_plain(est, ref),
            }
        )
    summary = {
        "split": split,
        "n": len(out_rows),
        "mean_si_sdr_db": float(np.mean([r["si_sdr_db"] for r in out_rows])),
        "mean_si_sdri_db": float(np.mean([r["si_sdri_db"] for r in out_rows])),
        "mean_sdr_db": float(np.mean([r["sdr_db"] for r in out_rows])),
        "stage": state.stage,
        "mode": state.mode,
        "checkpoint_hash": state.content_hash(),
        "cue_mode": cue_mode,
        "cue_severity": severity,
    }
    return out_rows, summary
