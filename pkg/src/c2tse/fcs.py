"""Fine-grained confidence scorer: per-frame unreliability prediction.

A linear strided conv front-end turns the waveform into 10 ms frames, a
small pre-norm transformer looks across the utterance, and a two-layer
affine head with a sigmoid emits p(unreliable) per frame. Training fits the
frame labels of the corruption simulator with binary cross-entropy; model
selection is by validation loss.
"""
from __future__ import annotations

import dataclasses
import math
import os

import numpy as np
import torch
import torch.nn as nn

from .audio import EncoderGeometry, Waveform, frame_count, read_wav
from .checkpoint import compute_content_hash, load_checkpoint, save_checkpoint
from .errors import CheckpointError, ConfigError, ShapeError
from .nets import TransformerStack
from .tracks import BCE_CLAMP, ScoreTrack, bce_loss, frame_auc, precision_recall
from .util import derive_rng, read_jsonl


@dataclasses.dataclass(frozen=True)
class FcsConfig:
    """Architecture and training knobs for the confidence scorer."""

    encoder: EncoderGeometry = EncoderGeometry(kernel=320, stride=160, channels=256)
    layers: int = 3
    heads: int = 4
    lr: float = 1e-5
    epochs: int = 30
    batch_size: int = 40

    def __post_init__(self):
        if self.layers < 1 or self.heads < 1:
            raise ConfigError("need at least one transformer layer and head")
        if self.encoder.channels % self.heads != 0:
            raise ConfigError(f"width {self.encoder.channels} not divisible by {self.heads} heads")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("bad training parameters")

    @property
    def width(self) -> int:
        # predictor width is tied to the encoder channel count
        return self.encoder.channels

    @classmethod
    def paper(cls) -> "FcsConfig":
        return cls()

    @classmethod
    def desk(cls) -> "FcsConfig":
        return cls(
            encoder=EncoderGeometry(kernel=320, stride=160, channels=64),
            layers=2,
            heads=2,
            lr=3e-4,
            epochs=12,
            batch_size=16,
        )

    def to_dict(self) -> dict:
        return {
            "kernel": self.encoder.kernel,
            "stride": self.encoder.stride,
            "channels": self.encoder.channels,
            "layers": self.layers,
            "heads": self.heads,
            "lr": self.lr,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FcsConfig":
        return cls(
            encoder=EncoderGeometry(d["kernel"], d["stride"], d["channels"]),
            layers=d["layers"],
            heads=d["heads"],
            lr=d["lr"],
            epochs=d["epochs"],
            batch_size=d["batch_size"],
        )


def fourier_init_(conv: nn.Conv1d) -> None:
    """Set the front-end to a bank of windowed sine/cosine pairs.

    Adjacent channels share a centre frequency (cos, then sin), linearly
    spaced from 50 Hz to just under Nyquist. A randomly initialized conv
    mixes every band into every channel, and the faint band-limited traces
    the scorer must pick up never survive that mixing long enough to train
    on. An odd trailing channel keeps its default init.
    """
    out_ch, _, kernel = conv.weight.shape
    n = np.arange(kernel)
    win = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / (kernel - 1))
    freqs = np.linspace(50.0, 7950.0, out_ch // 2)
    bank = np.empty((out_ch // 2 * 2, kernel))
    for i, f in enumerate(freqs):
        ang = 2.0 * np.pi * f * n / 16000.0
        bank[2 * i] = win * np.cos(ang)
        bank[2 * i + 1] = win * np.sin(ang)
    bank /= math.sqrt(kernel)
    with torch.no_grad():
        conv.weight[: bank.shape[0], 0, :] = torch.tensor(bank, dtype=conv.weight.dtype)


# -80 dBFS: low enough that faint interferer leakage in target pauses stays
# visible instead of compressing onto the silence plateau
LOG_ENERGY_FLOOR = 1e-8


class FcsNet(nn.Module):
    """Log-energy conv front-end + transformer + affine head.

    The speech encoder is a fixed filterbank (strided conv holding windowed
    sine/cosine pairs, not updated by the optimizer), log energy
    compression, and per-channel mean/variance normalization over the
    utterance, i.e. the classic log-filterbank + CMVN recipe. The filters
    stay fixed because any drift in them moves the whole feature
    distribution under the predictor faster than the predictor can follow;
    end-to-end training plateaus a full tier below the same predictor on
    frozen features. Both nonlinear steps are load-bearing:
    frame labels correlate with band energy, quadratic in the waveform, so
    purely linear paths carry zero first-order training signal; and
    absolute band levels vary across utterances far more than a corruption
    span shifts them, so only the within-utterance contrast separates the
    classes. Projected frames are scaled by sqrt(width) so the features are
    not drowned by the unit-scale position table.
    """

    def __init__(self, cfg: FcsConfig):
        super().__init__()
        geom = cfg.encoder
        self.encoder = nn.Conv1d(1, geom.channels, geom.kernel, stride=geom.stride, bias=False)
        fourier_init_(self.encoder)
        self.encoder.weight.requires_grad_(False)
        self.in_proj = nn.Linear(geom.channels, cfg.width)
        self.stack = TransformerStack(cfg.width, cfg.layers, cfg.heads)
        self.head = nn.Sequential(nn.Linear(cfg.width, cfg.width), nn.Linear(cfg.width, 1))
        self.scale = math.sqrt(cfg.width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, T) waveform -> logits (B, F)
        rep = self.encoder(x.unsqueeze(1))  # (B, C, F)
        rep = torch.log(rep.pow(2) + LOG_ENERGY_FLOOR)  # smooth everywhere, FD-checkable
        rep = rep - rep.mean(dim=-1, keepdim=True)
        # population std: the bessel-corrected one is NaN for 1-frame inputs
        rep = rep / rep.std(dim=-1, keepdim=True, correction=0).clamp_min(1e-5)
        h = self.in_proj(rep.transpose(1, 2)) * self.scale  # (B, F, W)
        h = self.stack(h)
        return self.head(h).squeeze(-1)


def bce_loss_torch(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean clamped BCE on probabilities; mirrors tracks.bce_loss exactly."""
    p = torch.sigmoid(logits).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(labels * torch.log(p) + (1.0 - labels) * torch.log(1.0 - p)).mean()


class FcsModel:
    """Confidence scorer plus its config and training-step counter."""

    kind = "fcs"

    def __init__(self, cfg: FcsConfig, net: FcsNet, step: int = 0, seed=None):
        self.cfg = cfg
        self.net = net
        self.step = step
        self.seed = seed

    @classmethod
    def init(cls, cfg: FcsConfig, seed: int) -> "FcsModel":
        torch.manual_seed(seed)
        return cls(cfg, FcsNet(cfg), step=0, seed=seed)

    def state_arrays(self) -> dict:
        return {name: tensor.detach().cpu().numpy().copy() for name, tensor in self.net.state_dict().items()}

    def content_hash(self) -> str:
        return compute_content_hash(self.kind, self.cfg.to_dict(), self.state_arrays(), step=self.step)

    def save(self, path) -> str:
        return save_checkpoint(
            path,
            self.kind,
            self.cfg.to_dict(),
            self.state_arrays(),
            step=self.step,
            seed=self.seed,
        )

    @classmethod
    def load(cls, path) -> "FcsModel":
        ckpt = load_checkpoint(path)
        if ckpt.kind != cls.kind:
            raise CheckpointError(f"{path}: kind {ckpt.kind!r}, expected {cls.kind!r}")
        cfg = FcsConfig.from_dict(ckpt.config)
        net = FcsNet(cfg)
        net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in ckpt.arrays.items()})
        return cls(cfg, net, step=ckpt.step, seed=ckpt.seed)

    @torch.no_grad()
    def predict_batch(self, x: np.ndarray) -> np.ndarray:
        """p(unreliable), shape (B, frame_count); x is (B, T) float."""
        self.net.eval()
        logits = self.net(torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32)))
        return torch.sigmoid(logits).numpy().astype(np.float64)

    def predict(self, w: Waveform) -> ScoreTrack:
        """Score one utterance; track length equals the encoder frame count."""
        n_frames = frame_count(len(w), self.cfg.encoder)
        p = self.predict_batch(w.samples[None, :])[0]
        if p.size != n_frames:  # conv output must agree with the arithmetic
            raise ShapeError(f"encoder produced {p.size} frames, expected {n_frames}")
        frame_ms = self.cfg.encoder.stride / 16.0
        return ScoreTrack(np.clip(p, 0.0, 1.0), frame_ms=frame_ms)


def _load_split(corpus_dir, rows):
    waves = []
    labels = []
    for row in rows:
        waves.append(os.path.join(corpus_dir, row["wav_path"]))
        labels.append(np.asarray(row["labels"], dtype=np.int8))
    lab = np.stack(labels) if labels else np.zeros((0, 0), dtype=np.int8)
    return waves, lab


def _batch_tensor(paths, idx) -> torch.Tensor:
    mats = [read_wav(paths[i]).samples.astype(np.float32) for i in idx]
    return torch.from_numpy(np.stack(mats))


def train_fcs(corpus_dir, cfg: FcsConfig, seed: int):
    """Fit the scorer on a simulated-output corpus.

    Reads manifest.jsonl under corpus_dir, trains on split == "train",
    selects the epoch with the lowest validation loss on split == "val" and
    returns that model.

    Args:
        corpus_dir: root of a corpus built by build_fcs_corpus.
        cfg: FcsConfig; epochs/lr/batch size come from here.
        seed: master seed for init and batch order.

    Returns:
        (FcsModel, log_rows) where log_rows has one dict per epoch.
    """
    corpus_dir = str(corpus_dir)
    rows = list(read_jsonl(os.path.join(corpus_dir, "manifest.jsonl")))
    train_rows = [r for r in rows if r["split"] == "train"]
    val_rows = [r for r in rows if r["split"] == "val"]
    if not train_rows or not val_rows:
        raise ConfigError("corpus needs non-empty train and val splits")

    train_paths, train_labels = _load_split(corpus_dir, train_rows)
    val_paths, val_labels = _load_split(corpus_dir, val_rows)

    model = FcsModel.init(cfg, seed)
    trainable = [p for p in model.net.parameters() if p.requires_grad]
    opt = torch.optim.Adam(trainable, lr=cfg.lr)
    shuffle_rng = derive_rng(seed, 17)

    best = {"val_loss": np.inf, "state": None, "epoch": -1, "step": 0}
    log = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        model.net.train()
        order = shuffle_rng.permutation(len(train_paths))
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            x = _batch_tensor(train_paths, idx)
            y = torch.from_numpy(train_labels[idx].astype(np.float32))
            loss = bce_loss_torch(model.net(x), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            losses.append(float(loss.detach()))
        train_loss = float(np.mean(losses))
        if not np.isfinite(train_loss):
            raise RuntimeError(f"training diverged at epoch {epoch} (loss={train_loss}); lower the lr")

        val_loss, val_auc = _validate(model, val_paths, val_labels, cfg.batch_size)
        log.append(
            {
                "epoch": epoch,
                "train_loss": round(train_loss, 6),
                "val_loss": round(val_loss, 6),
                "val_auc": None if val_auc is None else round(val_auc, 6),
                "steps": step,
            }
        )
        if val_loss < best["val_loss"]:
            best = {
                "val_loss": val_loss,
                "state": {k: v.clone() for k, v in model.net.state_dict().items()},
                "epoch": epoch,
                "step": step,
            }

    model.net.load_state_dict(best["state"])
    model.step = best["step"]
    log.append({"epoch": "best", "val_loss": round(best["val_loss"], 6), "best_epoch": best["epoch"], "steps": best["step"]})
    return model, log


def _validate(model: FcsModel, paths, labels, batch_size):
    preds = predict_paths(model, paths, batch_size)
    flat_p = preds.reshape(-1)
    flat_y = labels.reshape(-1)
    return bce_loss(flat_p, flat_y), frame_auc(flat_p, flat_y)


def predict_paths(model: FcsModel, paths, batch_size: int) -> np.ndarray:
    """Stacked p(unreliable) for a list of equal-length wav files."""
    outs = []
    for lo in range(0, len(paths), batch_size):
        idx = range(lo, min(lo + batch_size, len(paths)))
        x = _batch_tensor(paths, idx)
        outs.append(model.predict_batch(x.numpy()))
    return np.concatenate(outs) if outs else np.zeros((0, 0))


def evaluate_fcs(model: FcsModel, corpus_dir, split: str = "val") -> dict:
    """Frame-pooled quality of the scorer on one corpus split."""
    corpus_dir = str(corpus_dir)
    rows = [r for r in read_jsonl(os.path.join(corpus_dir, "manifest.jsonl")) if r["split"] == split]
    if not rows:
        raise ConfigError(f"no rows with split {split!r}")
    paths, labels = _load_split(corpus_dir, rows)
    preds = predict_paths(model, paths, model.cfg.batch_size)
    flat_p = preds.reshape(-1)
    flat_y = labels.reshape(-1)
    precision, recall = precision_recall(flat_p, flat_y)
    return {
        "split": split,
        "n_utterances": len(rows),
        "n_frames": int(flat_y.size),
        "n_unreliable": int(flat_y.sum()),
        "bce": round(bce_loss(flat_p, flat_y), 6),
        "auc": frame_auc(flat_p, flat_y),
        "precision_at_0.5": precision,
        "recall_at_0.5": recall,
    }
