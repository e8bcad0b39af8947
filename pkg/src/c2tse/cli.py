"""Command-line front end for the whole pipeline.

Subcommands follow the lifecycle: gen-corpus -> simulate-fcs-data ->
train-fcs -> pretrain -> finetune (global, then confidence) -> evaluate /
chunk-study / report, plus gridsearch-alphabeta for blend calibration.

Option precedence is CLI flag > config file (KEY=VALUE lines) > built-in
default; the effective configuration is echoed to stdout and written next
to the outputs. Commands that write training artifacts take an exclusive
lock on their output directory. Failures print a single JSON object to
stderr: {"code", "stage", "message"}; config/usage problems exit 2,
runtime problems exit 1.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys

import numpy as np
import torch

from . import backbone as bb
from . import finetune as ft
from .audio import Waveform
from .errors import C2tseError, ConfigError, LockError
from .fcs import FcsConfig, FcsModel, evaluate_fcs, train_fcs
from .mar import MarConfig
from .metrics import run_chunk_study
from .simulate import SimConfig, build_fcs_corpus, grid_search_alpha_beta
from .synth import build_mix_corpus
from .util import derive_rng, ensure_dir, np_json, read_jsonl, write_csv, write_jsonl

SEED_ENV = "C2TSE_SEED"


# ---------------------------------------------------------------- options

def _parse_config_file(path) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    out = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected KEY=VALUE")
            key, val = line.split("=", 1)
            out[key.strip().lower().replace("-", "_")] = val.strip()
    return out


def _convert(dest, raw, typ):
    if typ is bool:
        return raw.lower() in ("1", "true", "yes", "on")
    try:
        return typ(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {dest}: {raw!r}") from exc


def resolve_options(args, specs: dict, required=()) -> dict:
    """Merge CLI args, config file and defaults into one effective dict."""
    file_cfg = _parse_config_file(getattr(args, "config", None))
    eff = {}
    for dest, (default, typ) in specs.items():
        val = getattr(args, dest, None)
        if val is None and dest in file_cfg:
            val = _convert(dest, file_cfg[dest], typ)
        if val is None:
            val = default
        eff[dest] = val
    unknown = set(file_cfg) - set(specs)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for dest in required:
        if eff.get(dest) is None:
            raise ConfigError(f"missing required option --{dest.replace('_', '-')}")
    return eff


def _resolve_seed(eff) -> int:
    if eff.get("seed") is not None:
        return int(eff["seed"])
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    raise ConfigError(f"a seed is required: pass --seed or set {SEED_ENV}")


def _echo(command: str, eff: dict, out_dir=None) -> None:
    payload = {"command": command, **{k: v for k, v in eff.items() if k != "config"}}
    print(json.dumps(payload, sort_keys=True, default=np_json))
    if out_dir is not None:
        with open(os.path.join(out_dir, "run_config.json"), "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True, default=np_json)


@contextlib.contextmanager
def dir_lock(out_dir):
    """O_EXCL lock file; concurrent writers fail fast instead of interleaving."""
    path = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"output directory {out_dir} is locked (stale {path}? remove it)") from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(OSError):
            os.unlink(path)


def _load_fcs(path) -> FcsModel:
    if path is None:
        raise ConfigError("confidence fine-tuning and chunk studies need --fcs CHECKPOINT")
    return FcsModel.load(path)


# ---------------------------------------------------------------- commands

def cmd_gen_corpus(args) -> int:
    specs = {
        "out": (None, str),
        "train": (600, int),
        "val": (100, int),
        "test": (200, int),
        "duration": (4.0, float),
        "cue_noise": (0.02, float),
        "cue_dim": (20, int),
        "seed": (None, int),
    }
    eff = resolve_options(args, specs, required=("out",))
    eff["seed"] = _resolve_seed(eff)
    out = ensure_dir(eff["out"])
    with dir_lock(out):
        _echo("gen-corpus", eff, out)
        manifest = build_mix_corpus(
            out,
            {"train": eff["train"], "val": eff["val"], "test": eff["test"]},
            eff["seed"],
            duration_s=eff["duration"],
            cue_noise=eff["cue_noise"],
            cue_dim=eff["cue_dim"],
        )
    print(f"wrote {manifest}")
    return 0


def cmd_simulate_fcs_data(args) -> int:
    specs = {
        "corpus": (None, str),
        "out": (None, str),
        "count": (2000, int),
        "alpha": (0.9, float),
        "beta": (0.2, float),
        "n_max": (20, int),
        "g_ms": (10.0, float),
        "val_fraction": (0.1, float),
        "seed": (None, int),
    }
    eff = resolve_options(args, specs, required=("corpus", "out"))
    eff["seed"] = _resolve_seed(eff)
    if not (0.0 < eff["val_fraction"] < 1.0):
        raise ConfigError("val_fraction must sit in (0, 1)")
    corpus = bb.MixCorpus(eff["corpus"])
    cfg = SimConfig(alpha=eff["alpha"], beta=eff["beta"], n_max=eff["n_max"], g_ms=eff["g_ms"])
    n_val = max(1, round(eff["count"] * eff["val_fraction"]))
    n_train = eff["count"] - n_val
    if n_train < 1:
        raise ConfigError("count too small for the requested val fraction")

    def pools(split):
        rows = corpus.rows(split)
        if not rows:
            raise ConfigError(f"mixture corpus has no {split!r} rows")
        t = [os.path.join(corpus.root, r["target_path"]) for r in rows]
        z = [os.path.join(corpus.root, r["interferer_path"]) for r in rows]
        return t, z

    out = ensure_dir(eff["out"])
    with dir_lock(out):
        _echo("simulate-fcs-data", eff, out)
        t_train, z_train = pools("train")
        t_val, z_val = pools("val")
        rows = build_fcs_corpus(t_train, z_train, cfg, n_train, eff["seed"], out, split="train")
        rows += build_fcs_corpus(t_val, z_val, cfg, n_val, eff["seed"], out, split="val", start_uid=n_train)
        write_jsonl(os.path.join(out, "manifest.jsonl"), rows)
    n_unrel = sum(sum(r["labels"]) for r in rows)
    n_frames = sum(len(r["labels"]) for r in rows)
    print(f"wrote {len(rows)} simulated utterances ({n_unrel}/{n_frames} frames unreliable)")
    return 0


def cmd_train_fcs(args) -> int:
    specs = {
        "corpus": (None, str),
        "out": (None, str),
        "preset": ("desk", str),
        "epochs": (None, int),
        "lr": (None, float),
        "batch_size": (None, int),
        "seed": (None, int),
    }
    eff = resolve_options(args, specs, required=("corpus", "out"))
    eff["seed"] = _resolve_seed(eff)
    if eff["preset"] not in ("desk", "paper"):
        raise ConfigError(f"unknown preset {eff['preset']!r}")
    base = FcsConfig.desk() if eff["preset"] == "desk" else FcsConfig.paper()
    cfg = FcsConfig(
        encoder=base.encoder,
        layers=base.layers,
        heads=base.heads,
        lr=eff["lr"] if eff["lr"] is not None else base.lr,
        epochs=eff["epochs"] if eff["epochs"] is not None else base.epochs,
        batch_size=eff["batch_size"] if eff["batch_size"] is not None else base.batch_size,
    )
    out = ensure_dir(eff["out"])
    with dir_lock(out):
        _echo("train-fcs", eff, out)
        model, log = train_fcs(eff["corpus"], cfg, eff["seed"])
        metrics = evaluate_fcs(model, eff["corpus"], "val")
        model.save(os.path.join(out, "fcs.ckpt"))
        write_csv(os.path.join(out, "train_log.csv"), log)
        with open(os.path.join(out, "metrics.json"), "w") as fh:
            json.dump(metrics, fh, indent=2, default=np_json)
    print(f"val auc {metrics['auc']:.4f} bce {metrics['bce']:.4f} -> {os.path.join(out, 'fcs.ckpt')}")
    return 0


def cmd_pretrain(args) -> int:
    specs = {
        "corpus": (None, str),
        "out": (None, str),
        "epochs": (12, int),
        "lr": (1e-3, float),
        "warmup_steps": (300, int),
        "batch_size": (8, int),
        "seed": (None, int),
    }
    eff = resolve_options(args, specs, required=("corpus", "out"))
    eff["seed"] = _resolve_seed(eff)
    corpus = bb.MixCorpus(eff["corpus"])
    out = ensure_dir(eff["out"])
    with dir_lock(out):
        _echo("pretrain", eff, out)
        state = bb.BackboneState.new(bb.BackboneConfig.desk(), eff["seed"])
        state, log = bb.pretrain(
            state,
            corpus,
            epochs=eff["epochs"],
            lr=eff["lr"],
            warmup_steps=eff["warmup_steps"],
            batch_size=eff["batch_size"],
        )
        path = os.path.join(out, "vanilla.ckpt")
        ckpt_hash = state.save(path)
        write_csv(os.path.join(out, "train_log.csv"), log)
    print(f"vanilla checkpoint {path} ({ckpt_hash[:18]}...)")
    return 0


def cmd_finetune(args) -> int:
    specs = {
        "corpus": (None, str),
        "checkpoint": (None, str),
        "out": (None, str),
        "stage": (None, str),
        "mode": ("ss", str),
        "fcs": (None, str),
        "epochs": (None, int),
        "lr": (15e-5, float),
        "g_ms": (300.0, float),
        "batch_size": (8, int),
        "pool": (8, int),
        "mar_width": (64, int),
        "mar_layers": (2, int),
        "mar_heads": (2, int),
        "seed": (None, int),
    }
    eff = resolve_options(args, specs, required=("corpus", "checkpoint", "out", "stage"))
    eff["seed"] = _resolve_seed(eff)
    if eff["stage"] not in ("global", "confidence"):
        raise ConfigError(f"stage must be global or confidence, got {eff['stage']!r}")
    mode = eff["mode"].replace("-", "_")
    if eff["stage"] == "confidence" and mode not in ft.CONFIDENCE_MODES:
        raise ConfigError(f"mode must be one of ss, s-full, s-adapter, got {eff['mode']!r}")
    epochs = eff["epochs"] if eff["epochs"] is not None else (15 if eff["stage"] == "global" else 10)
    cfg = ft.FinetuneConfig(
        g_ms=eff["g_ms"],
        lr=eff["lr"],
        epochs_global=epochs if eff["stage"] == "global" else 15,
        epochs_confidence=epochs if eff["stage"] == "confidence" else 10,
        batch_size=eff["batch_size"],
        mar=MarConfig(layers=eff["mar_layers"], heads=eff["mar_heads"], width=eff["mar_width"], pool=eff["pool"]),
    )
    corpus = bb.MixCorpus(eff["corpus"])
    state = bb.BackboneState.load(eff["checkpoint"])
    out = ensure_dir(eff["out"])
    with dir_lock(out):
        _echo("finetune", eff, out)
        if eff["stage"] == "global":
            state, log, audit = ft.stage1_global(state, corpus, cfg, eff["seed"])
            name = "global.ckpt"
        else:
            fcs_model = _load_fcs(eff["fcs"])
            if mode == "ss":
                state, log, audit = ft.stage2_ss(state, corpus, cfg, fcs_model, eff["seed"])
            else:
                state, log, audit = ft.stage2_supervised(
                    state, corpus, cfg, fcs_model, eff["seed"], adapter_only=(mode == "s_adapter")
                )
            name = f"confidence_{mode}.ckpt"
        path = os.path.join(out, name)
        ckpt_hash = state.save(path)
        write_csv(os.path.join(out, "train_log.csv"), log)
        with open(os.path.join(out, "freeze_audit.json"), "w") as fh:
            json.dump(audit, fh, indent=2)
    if not audit["ok"]:
        raise RuntimeError(f"freeze audit failed: {audit}")
    print(f"stage {state.stage}/{state.mode or '-'} checkpoint {path} ({ckpt_hash[:18]}...)")
    return 0


def cmd_evaluate(args) -> int:
    specs = {
        "corpus": (None, str),
        "checkpoint": (None, str),
        "out": (None, str),
        "split": ("test", str),
        "cue_mode": (None, str),
        "severity": (0.0, float),
        "batch_size": (8, int),
        "seed": (0, int),
    }
    eff = resolve_options(args, specs, required=("corpus", "checkpoint", "out"))
    if eff["cue_mode"] is not None and eff["cue_mode"] not in ("occlusion", "lowres"):
        raise ConfigError(f"cue-mode must be occlusion or lowres, got {eff['cue_mode']!r}")
    corpus = bb.MixCorpus(eff["corpus"])
    state = bb.BackboneState.load(eff["checkpoint"])
    out = ensure_dir(eff["out"])
    _echo("evaluate", eff, out)
    rows, summary = bb.evaluate_extraction(
        state,
        corpus,
        eff["split"],
        cue_mode=eff["cue_mode"],
        severity=eff["severity"],
        seed=eff["seed"],
        batch_size=eff["batch_size"],
    )
    summary["lineage"] = state.lineage + [
        {"stage": state.stage, "mode": state.mode, "hash": summary["checkpoint_hash"], "seed": state.seed, "step": state.step}
    ]
    write_csv(os.path.join(out, "per_utterance.csv"), rows)
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, default=np_json)
    print(
        f"{summary['stage']}/{summary['mode'] or '-'} on {eff['split']}: "
        f"si_sdr {summary['mean_si_sdr_db']:.3f} dB, si_sdri {summary['mean_si_sdri_db']:.3f} dB (n={summary['n']})"
    )
    return 0


def cmd_chunk_study(args) -> int:
    specs = {
        "corpus": (None, str),
        "checkpoint": (None, str),
        "fcs": (None, str),
        "out": (None, str),
        "split": ("test", str),
        "chunks": ("200,400,600", str),
        "clip_db": (60.0, float),
        "batch_size": (8, int),
        "seed": (None, int),
    }
    eff = resolve_options(args, specs, required=("corpus", "checkpoint", "fcs", "out"))
    eff["seed"] = _resolve_seed(eff)
    chunk_list = [int(c) for c in str(eff["chunks"]).split(",") if c.strip()]
    if not chunk_list:
        raise ConfigError("no chunk sizes given")
    corpus = bb.MixCorpus(eff["corpus"])
    state = bb.BackboneState.load(eff["checkpoint"])
    fcs_model = _load_fcs(eff["fcs"])
    out = ensure_dir(eff["out"])
    _echo("chunk-study", eff, out)

    eval_rows = corpus.rows(eff["split"])
    pairs = []
    for row, est in bb.run_extraction(state, corpus, eval_rows, batch_size=eff["batch_size"]):
        est_w = Waveform(est)
        pairs.append((est_w, corpus.load_target(row), fcs_model.predict(est_w)))

    reports = []
    csv_rows = []
    for chunk_ms in chunk_list:
        rep = run_chunk_study(pairs, chunk_ms, derive_rng(eff["seed"], 53, chunk_ms), clip_db=eff["clip_db"])
        reports.append(rep.to_dict())
        csv_rows.extend(rep.to_rows())
        print(
            f"chunk {chunk_ms} ms: unreliable {rep.means_db['unreliable']:.3f} / "
            f"reliable {rep.means_db['reliable']:.3f} / random {rep.means_db['random']:.3f} dB, "
            f"p(rel) {rep.p_unreliable_vs_reliable:.5f} p(rand) {rep.p_unreliable_vs_random:.5f}"
        )
    write_csv(os.path.join(out, "chunk_study.csv"), csv_rows)
    with open(os.path.join(out, "chunk_study.json"), "w") as fh:
        json.dump({"checkpoint": eff["checkpoint"], "split": eff["split"], "reports": reports}, fh, indent=2, default=np_json)
    return 0


def cmd_gridsearch(args) -> int:
    specs = {
        "corpus": (None, str),
        "out": (None, str),
        "split": ("train", str),
        "limit": (50, int),
        "stride": (0.1, float),
    }
    eff = resolve_options(args, specs, required=("corpus", "out"))
    if not (0.0 < eff["stride"] <= 1.0):
        raise ConfigError("stride must sit in (0, 1]")
    corpus = bb.MixCorpus(eff["corpus"])
    rows = corpus.rows(eff["split"])[: eff["limit"]]
    if not rows:
        raise ConfigError(f"no rows with split {eff['split']!r}")
    pairs = [(corpus.load_target(r), corpus.load_interferer(r)) for r in rows]
    axis = np.round(np.arange(0.0, 1.0 + 1e-9, eff["stride"]), 10)
    result = grid_search_alpha_beta(pairs, alphas=axis, betas=axis)
    out = ensure_dir(eff["out"])
    _echo("gridsearch-alphabeta", eff, out)
    write_csv(os.path.join(out, "grid.csv"), result.to_rows())
    with open(os.path.join(out, "grid.json"), "w") as fh:
        json.dump(
            {
                "alphas": result.alphas.tolist(),
                "betas": result.betas.tolist(),
                "mean_si_sdr_db": result.mean_si_sdr_db.tolist(),
                "n_pairs": result.n_pairs,
            },
            fh,
            indent=2,
            default=np_json,
        )
    print(f"grid over {len(axis)}x{len(axis)} cells on {result.n_pairs} pairs -> {os.path.join(out, 'grid.csv')}")
    return 0


def cmd_report(args) -> int:
    specs = {"runs": (None, str), "out": (None, str)}
    eff = resolve_options(args, specs, required=("runs", "out"))
    summaries = []
    chunk_reports = []
    for root, _, files in sorted(os.walk(eff["runs"])):
        if "summary.json" in files:
            with open(os.path.join(root, "summary.json")) as fh:
                summaries.append({"run": os.path.relpath(root, eff["runs"]), **json.load(fh)})
        if "chunk_study.json" in files:
            with open(os.path.join(root, "chunk_study.json")) as fh:
                chunk_reports.append(json.load(fh))
    if not summaries:
        raise ConfigError(f"no summary.json files under {eff['runs']}")

    stage_rank = {"vanilla": 0, "global": 1, "confidence": 2}
    summaries.sort(key=lambda s: (stage_rank.get(s.get("stage"), 9), str(s.get("mode"))))
    base = next((s for s in summaries if s.get("stage") == "vanilla" and s.get("cue_mode") is None), None)
    table = []
    for s in summaries:
        gain = None if base is None else s["mean_si_sdr_db"] - base["mean_si_sdr_db"]
        table.append(
            {
                "run": s["run"],
                "stage": s.get("stage"),
                "mode": s.get("mode") or "-",
                "cue_mode": s.get("cue_mode") or "clean",
                "severity": s.get("cue_severity", 0.0),
                "split": s.get("split"),
                "n": s.get("n"),
                "si_sdr_db": round(s["mean_si_sdr_db"], 4),
                "si_sdri_db": round(s["mean_si_sdri_db"], 4),
                "gain_over_vanilla_db": None if gain is None else round(gain, 4),
            }
        )

    verdict = {}
    clean = [s for s in summaries if s.get("cue_mode") is None]
    by_stage = {s["stage"]: s for s in clean if s.get("stage") != "confidence"}
    conf = [s for s in clean if s.get("stage") == "confidence"]
    if "vanilla" in by_stage and "global" in by_stage:
        verdict["gain_global_db"] = round(by_stage["global"]["mean_si_sdr_db"] - by_stage["vanilla"]["mean_si_sdr_db"], 4)
    if conf and "global" in by_stage:
        best = max(conf, key=lambda s: s["mean_si_sdr_db"])
        verdict["best_confidence_mode"] = best.get("mode")
        verdict["gain_confidence_db"] = round(best["mean_si_sdr_db"] - by_stage["global"]["mean_si_sdr_db"], 4)
    if "gain_global_db" in verdict:
        verdict["ordering_ok"] = verdict["gain_global_db"] > 0 and verdict.get("gain_confidence_db", 0.0) >= 0
    out = ensure_dir(eff["out"])
    _echo("report", eff, out)
    write_csv(os.path.join(out, "report.csv"), table)
    with open(os.path.join(out, "report.json"), "w") as fh:
        json.dump({"table": table, "verdict": verdict, "chunk_studies": chunk_reports}, fh, indent=2, default=np_json)
    for row in table:
        print(
            f"{row['stage']:>10}/{row['mode']:<9} {row['cue_mode']:<9} "
            f"si_sdr {row['si_sdr_db']:8.3f}  si_sdri {row['si_sdri_db']:8.3f}  (n={row['n']})"
        )
    if verdict:
        print(json.dumps({"verdict": verdict}, sort_keys=True))
    return 0


# ---------------------------------------------------------------- parser

def _add_common(sp):
    sp.add_argument("--config", help="KEY=VALUE config file; CLI flags win over it")
    sp.add_argument("--seed", type=int, help=f"master seed (falls back to ${SEED_ENV})")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="c2tse", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command")

    sp = sub.add_parser("gen-corpus", help="synthesise a mixture corpus with cue tracks")
    _add_common(sp)
    sp.add_argument("--out")
    sp.add_argument("--train", type=int)
    sp.add_argument("--val", type=int)
    sp.add_argument("--test", type=int)
    sp.add_argument("--duration", type=float)
    sp.add_argument("--cue-noise", dest="cue_noise", type=float)
    sp.add_argument("--cue-dim", dest="cue_dim", type=int)
    sp.set_defaults(func=cmd_gen_corpus)

    sp = sub.add_parser("simulate-fcs-data", help="corrupt clean targets into a labelled scorer corpus")
    _add_common(sp)
    sp.add_argument("--corpus")
    sp.add_argument("--out")
    sp.add_argument("--count", type=int)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--beta", type=float)
    sp.add_argument("--n-max", dest="n_max", type=int)
    sp.add_argument("--g-ms", dest="g_ms", type=float)
    sp.add_argument("--val-fraction", dest="val_fraction", type=float)
    sp.set_defaults(func=cmd_simulate_fcs_data)

    sp = sub.add_parser("train-fcs", help="train the frame confidence scorer")
    _add_common(sp)
    sp.add_argument("--corpus")
    sp.add_argument("--out")
    sp.add_argument("--preset", choices=("desk", "paper"))
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.set_defaults(func=cmd_train_fcs)

    sp = sub.add_parser("pretrain", help="train the vanilla extractor")
    _add_common(sp)
    sp.add_argument("--corpus")
    sp.add_argument("--out")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--warmup-steps", dest="warmup_steps", type=int)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("finetune", help="global or confidence fine-tuning")
    _add_common(sp)
    sp.add_argument("--corpus")
    sp.add_argument("--checkpoint")
    sp.add_argument("--out")
    sp.add_argument("--stage", choices=("global", "confidence"))
    sp.add_argument("--mode", choices=("ss", "s-full", "s-adapter"))
    sp.add_argument("--fcs")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--g-ms", dest="g_ms", type=float)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--pool", type=int)
    sp.add_argument("--mar-width", dest="mar_width", type=int)
    sp.add_argument("--mar-layers", dest="mar_layers", type=int)
    sp.add_argument("--mar-heads", dest="mar_heads", type=int)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("evaluate", help="score a checkpoint on one split")
    _add_common(sp)
    sp.add_argument("--corpus")
    sp.add_argument("--checkpoint")
    sp.add_argument("--out")
    sp.add_argument("--split")
    sp.add_argument("--cue-mode", dest="cue_mode", choices=("occlusion", "lowres"))
    sp.add_argument("--severity", type=float)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("chunk-study", help="unreliable vs reliable vs random chunk comparison")
    _add_common(sp)
    sp.add_argument("--corpus")
    sp.add_argument("--checkpoint")
    sp.add_argument("--fcs")
    sp.add_argument("--out")
    sp.add_argument("--split")
    sp.add_argument("--chunks")
    sp.add_argument("--clip-db", dest="clip_db", type=float)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.set_defaults(func=cmd_chunk_study)

    sp = sub.add_parser("gridsearch-alphabeta", help="mean SI-SDR over the blend-weight grid")
    _add_common(sp)
    sp.add_argument("--corpus")
    sp.add_argument("--out")
    sp.add_argument("--split")
    sp.add_argument("--limit", type=int)
    sp.add_argument("--stride", type=float)
    sp.set_defaults(func=cmd_gridsearch)

    sp = sub.add_parser("report", help="collect evaluate/chunk-study outputs into one table")
    _add_common(sp)
    sp.add_argument("--runs")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)

    return p


def main(argv=None) -> int:
    torch.set_num_threads(1)  # bit-level reproducibility of the training runs
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_help()
        return 2
    try:
        return args.func(args) or 0
    except C2tseError as exc:
        payload = {"code": exc.code, "stage": args.command, "message": str(exc)}
        print(json.dumps(payload), file=sys.stderr)
        return 2 if exc.code in ("config", "usage") else 1


if __name__ == "__main__":
    sys.exit(main())
