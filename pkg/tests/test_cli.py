import json
import os

import numpy as np
import pytest

from c2tse import cli
from c2tse.errors import ConfigError, LockError


class DummyArgs:
    def __init__(self, **kw):
        self.__dict__.update(kw)


class TestOptionResolution:
    SPECS = {"alpha": (0.5, float), "count": (3, int), "flag": (False, bool), "out": (None, str)}

    def test_defaults_apply(self):
        eff = cli.resolve_options(DummyArgs(), self.SPECS)
        assert eff == {"alpha": 0.5, "count": 3, "flag": False, "out": None}

    def test_cli_beats_config_file(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("alpha = 0.9\ncount=7\n")
        args = DummyArgs(config=str(cfg), alpha=0.1)
        eff = cli.resolve_options(args, self.SPECS)
        assert eff["alpha"] == 0.1  # flag wins
        assert eff["count"] == 7  # file beats default

    def test_config_file_types_and_comments(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# comment\n\nflag = yes\nout = /tmp/x  # trailing\n")
        eff = cli.resolve_options(DummyArgs(config=str(cfg)), self.SPECS)
        assert eff["flag"] is True
        assert eff["out"] == "/tmp/x"

    def test_dashes_normalize_to_underscores(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("COUNT=9\n")
        eff = cli.resolve_options(DummyArgs(config=str(cfg)), self.SPECS)
        assert eff["count"] == 9

    def test_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("bogus=1\n")
        with pytest.raises(ConfigError, match="bogus"):
            cli.resolve_options(DummyArgs(config=str(cfg)), self.SPECS)

    def test_bad_value_rejected(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("count=three\n")
        with pytest.raises(ConfigError, match="count"):
            cli.resolve_options(DummyArgs(config=str(cfg)), self.SPECS)

    def test_missing_required(self):
        with pytest.raises(ConfigError, match="--out"):
            cli.resolve_options(DummyArgs(), self.SPECS, required=("out",))

    def test_malformed_line(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("just a line\n")
        with pytest.raises(ConfigError, match=":1"):
            cli.resolve_options(DummyArgs(config=str(cfg)), self.SPECS)

    def test_missing_config_file(self):
        with pytest.raises(ConfigError, match="not found"):
            cli.resolve_options(DummyArgs(config="/nonexistent/x.cfg"), self.SPECS)


class TestSeedResolution:
    def test_flag_beats_env(self, monkeypatch):
        monkeypatch.setenv(cli.SEED_ENV, "11")
        assert cli._resolve_seed({"seed": 5}) == 5

    def test_env_fallback(self, monkeypatch):
        monkeypatch.setenv(cli.SEED_ENV, "11")
        assert cli._resolve_seed({"seed": None}) == 11

    def test_bad_env(self, monkeypatch):
        monkeypatch.setenv(cli.SEED_ENV, "eleven")
        with pytest.raises(ConfigError):
            cli._resolve_seed({"seed": None})

    def test_missing_entirely(self, monkeypatch):
        monkeypatch.delenv(cli.SEED_ENV, raising=False)
        with pytest.raises(ConfigError, match="seed"):
            cli._resolve_seed({"seed": None})


class TestDirLock:
    def test_lock_released_after_use(self, tmp_path):
        with cli.dir_lock(tmp_path):
            assert (tmp_path / ".lock").exists()
        assert not (tmp_path / ".lock").exists()

    def test_second_writer_fails_fast(self, tmp_path):
        with cli.dir_lock(tmp_path):
            with pytest.raises(LockError, match="locked"):
                with cli.dir_lock(tmp_path):
                    pass

    def test_released_on_error(self, tmp_path):
        with pytest.raises(RuntimeError):
            with cli.dir_lock(tmp_path):
                raise RuntimeError("boom")
        assert not (tmp_path / ".lock").exists()


class TestMainDispatch:
    def test_no_command_prints_help(self, capsys):
        assert cli.main([]) == 2
        assert "gen-corpus" in capsys.readouterr().out

    def test_config_error_exits_2_with_json(self, capsys, monkeypatch):
        monkeypatch.delenv(cli.SEED_ENV, raising=False)
        rc = cli.main(["gen-corpus", "--out", "/tmp/whatever-unused"])
        assert rc == 2
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["code"] == "config"
        assert err["stage"] == "gen-corpus"

    def test_unknown_choice_rejected_by_argparse(self):
        with pytest.raises(SystemExit):
            cli.main(["train-fcs", "--preset", "huge"])

    def test_lock_error_exits_1(self, tmp_path, capsys):
        os.mkdir(tmp_path / "out")
        (tmp_path / "out" / ".lock").write_text("123\n")
        rc = cli.main(["gen-corpus", "--out", str(tmp_path / "out"), "--seed", "0", "--train", "1", "--val", "1", "--test", "1", "--duration", "1.0"])
        assert rc == 1
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["code"] == "locked"


# one tiny corpus drives every pipeline command below; build order matters,
# so the fixture runs the whole chain once and the tests just inspect it
@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, capsysbinary=None):
    root = tmp_path_factory.mktemp("cli_pipe")
    corpus = root / "corpus"
    paths = {
        "root": root,
        "corpus": corpus,
        "sim": root / "sim",
        "fcs": root / "fcs",
        "pre": root / "pre",
        "gf": root / "gf",
        "cf": root / "cf",
        "ev_van": root / "eval" / "vanilla",
        "ev_gf": root / "eval" / "gf",
        "chunk": root / "chunk",
        "grid": root / "grid",
        "report": root / "report",
    }
    steps = [
        ["gen-corpus", "--out", str(corpus), "--train", "8", "--val", "3", "--test", "3",
         "--duration", "1.0", "--seed", "5"],
        ["simulate-fcs-data", "--corpus", str(corpus), "--out", str(paths["sim"]),
         "--count", "10", "--seed", "6"],
        ["train-fcs", "--corpus", str(paths["sim"]), "--out", str(paths["fcs"]),
         "--epochs", "1", "--batch-size", "4", "--seed", "7"],
        ["pretrain", "--corpus", str(corpus), "--out", str(paths["pre"]),
         "--epochs", "1", "--warmup-steps", "5", "--batch-size", "4", "--seed", "8"],
        ["finetune", "--corpus", str(corpus), "--checkpoint", str(paths["pre"] / "vanilla.ckpt"),
         "--out", str(paths["gf"]), "--stage", "global", "--epochs", "1", "--g-ms", "200",
         "--mar-width", "16", "--mar-layers", "1", "--pool", "4", "--batch-size", "4", "--seed", "9"],
        ["finetune", "--corpus", str(corpus), "--checkpoint", str(paths["gf"] / "global.ckpt"),
         "--out", str(paths["cf"]), "--stage", "confidence", "--mode", "ss",
         "--fcs", str(paths["fcs"] / "fcs.ckpt"), "--epochs", "1", "--g-ms", "200",
         "--batch-size", "4", "--seed", "10"],
        ["evaluate", "--corpus", str(corpus), "--checkpoint", str(paths["pre"] / "vanilla.ckpt"),
         "--out", str(paths["ev_van"]), "--split", "test"],
        ["evaluate", "--corpus", str(corpus), "--checkpoint", str(paths["gf"] / "global.ckpt"),
         "--out", str(paths["ev_gf"]), "--split", "test"],
        ["chunk-study", "--corpus", str(corpus), "--checkpoint", str(paths["gf"] / "global.ckpt"),
         "--fcs", str(paths["fcs"] / "fcs.ckpt"), "--out", str(paths["chunk"]),
         "--chunks", "200", "--seed", "11"],
        ["gridsearch-alphabeta", "--corpus", str(corpus), "--out", str(paths["grid"]),
         "--limit", "4", "--stride", "0.5"],
        ["report", "--runs", str(root / "eval"), "--out", str(paths["report"])],
    ]
    for argv in steps:
        rc = cli.main(argv)
        assert rc == 0, f"command failed: {argv}"
    return paths


class TestPipelineArtifacts:
    def test_corpus_layout(self, pipeline):
        assert (pipeline["corpus"] / "manifest.jsonl").exists()
        cfg = json.loads((pipeline["corpus"] / "run_config.json").read_text())
        assert cfg["command"] == "gen-corpus"
        assert cfg["seed"] == 5

    def test_sim_manifest_counts(self, pipeline):
        rows = [json.loads(l) for l in (pipeline["sim"] / "manifest.jsonl").read_text().splitlines()]
        assert len(rows) == 10
        assert {r["split"] for r in rows} == {"train", "val"}

    def test_fcs_artifacts(self, pipeline):
        assert (pipeline["fcs"] / "fcs.ckpt").exists()
        assert (pipeline["fcs"] / "train_log.csv").exists()
        metrics = json.loads((pipeline["fcs"] / "metrics.json").read_text())
        assert 0.0 <= metrics["auc"] <= 1.0

    def test_checkpoint_chain(self, pipeline):
        from c2tse.backbone import BackboneState

        van = BackboneState.load(pipeline["pre"] / "vanilla.ckpt")
        gf = BackboneState.load(pipeline["gf"] / "global.ckpt")
        cf = BackboneState.load(pipeline["cf"] / "confidence_ss.ckpt")
        assert (van.stage, gf.stage, cf.stage) == ("vanilla", "global", "confidence")
        assert cf.mode == "ss"
        assert gf.parent_hash == van.content_hash()
        assert [e["stage"] for e in cf.lineage] == ["init", "vanilla", "global"]

    def test_freeze_audits_written(self, pipeline):
        for d in ("gf", "cf"):
            audit = json.loads((pipeline[d] / "freeze_audit.json").read_text())
            assert audit["ok"]

    def test_eval_summaries(self, pipeline):
        for d in ("ev_van", "ev_gf"):
            s = json.loads((pipeline[d] / "summary.json").read_text())
            assert s["n"] == 3
            assert np.isfinite(s["mean_si_sdr_db"])
            assert (pipeline[d] / "per_utterance.csv").exists()

    def test_chunk_study_outputs(self, pipeline):
        rep = json.loads((pipeline["chunk"] / "chunk_study.json").read_text())
        assert rep["reports"][0]["chunk_ms"] == 200
        assert (pipeline["chunk"] / "chunk_study.csv").exists()

    def test_grid_outputs(self, pipeline):
        grid = json.loads((pipeline["grid"] / "grid.json").read_text())
        assert len(grid["alphas"]) == 3  # stride 0.5 -> 0, 0.5, 1.0
        assert grid["n_pairs"] == 4

    def test_report_table_and_verdict(self, pipeline):
        rep = json.loads((pipeline["report"] / "report.json").read_text())
        stages = [row["stage"] for row in rep["table"]]
        assert stages == sorted(stages, key=lambda s: {"vanilla": 0, "global": 1}.get(s, 9))
        assert "gain_global_db" in rep["verdict"]

    def test_locks_cleaned_up(self, pipeline):
        for key in ("corpus", "sim", "fcs", "pre", "gf", "cf"):
            assert not (pipeline[key] / ".lock").exists()

    def test_rerun_into_same_dir_needs_lock_removal(self, pipeline, capsys):
        rc = cli.main([
            "gen-corpus", "--out", str(pipeline["corpus"]), "--train", "1", "--val", "1",
            "--test", "1", "--seed", "5",
        ])
        # lock is gone, so the command reruns fine and overwrites
        assert rc == 0
