"""End-to-end tests for the command-line interface and its exit codes."""

import json
import os

import numpy as np
import pytest

from anomsearch.cli import (
    EXIT_CONFIG,
    EXIT_DIVERGED,
    EXIT_HASH_MISMATCH,
    EXIT_IO,
    EXIT_UNKNOWN_TOKENS,
    ConfigError,
    load_config,
    main,
)
from anomsearch.objectives import TrainingDiverged

TINY_TOML = """
[corpus]
n_identities = 4
test_identities = 3
image_size = 16
seed = 0

[model]
dim = 8
heads = 2
image_blocks = 1
text_blocks = 1
cross_blocks = 1
proj_dim = 8

[train]
batch_size = 4
epochs = 1
warmup = 2
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A generated corpus plus a 1-epoch training run, shared by the tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.toml"
    cfg.write_text(TINY_TOML)
    corpus = root / "corpus"
    run = root / "run"
    assert main(["gen-corpus", "--config", str(cfg), "--out", str(corpus)]) == 0
    assert main(["train", "--config", str(cfg), "--corpus", str(corpus),
                 "--out", str(run)]) == 0
    return {"root": root, "config": cfg, "corpus": corpus, "run": run}


class TestConfigLoading:
    def test_defaults_pass_validation(self):
        config = load_config()
        assert config["train"]["batch_size"] == 22
        assert config["eval"]["shortlist_k"] == 128

    def test_toml_overrides_defaults(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("[train]\nepochs = 3\n")
        assert load_config(str(p))["train"]["epochs"] == 3

    def test_unknown_field_rejected(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("[train]\nlearning = 1\n")
        with pytest.raises(ConfigError):
            load_config(str(p))

    def test_unknown_section_rejected(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("[optimizer]\nlr = 1.0\n")
        with pytest.raises(ConfigError):
            load_config(str(p))

    def test_wrong_type_rejected(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('[train]\nepochs = "three"\n')
        with pytest.raises(ConfigError):
            load_config(str(p))

    def test_int_promoted_to_float(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("[train]\nlr_start = 1\n")
        config = load_config(str(p))
        assert config["train"]["lr_start"] == 1.0
        assert isinstance(config["train"]["lr_start"], float)

    def test_bad_eval_setting_rejected(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('[eval]\nsetting = "fuzzy"\n')
        with pytest.raises(ConfigError):
            load_config(str(p))


class TestGenCorpus:
    def test_outputs_and_report(self, workspace):
        corpus = workspace["corpus"]
        assert (corpus / "manifest.jsonl").exists()
        assert (corpus / "pair_index.json").exists()
        report = json.loads((corpus / "report.json").read_text())
        # 4 identities at 2:3 -> 8 normal / 12 anomaly training records
        assert report["normal_count"] == 8
        assert report["anomaly_count"] == 12
        assert report["n_test"] == 6
        assert report["config_hash"]

    def test_deterministic_across_invocations(self, workspace, tmp_path):
        again = tmp_path / "corpus2"
        assert main(["gen-corpus", "--config", str(workspace["config"]),
                     "--out", str(again)]) == 0
        a = (workspace["corpus"] / "manifest.jsonl").read_bytes()
        b = (again / "manifest.jsonl").read_bytes()
        assert a == b

    def test_seed_flag_changes_hash(self, workspace, tmp_path):
        out = tmp_path / "corpus3"
        assert main(["gen-corpus", "--config", str(workspace["config"]),
                     "--seed", "99", "--out", str(out)]) == 0
        r0 = json.loads((workspace["corpus"] / "report.json").read_text())
        r1 = json.loads((out / "report.json").read_text())
        assert r0["config_hash"] != r1["config_hash"]

    def test_bad_config_exits_2(self, workspace, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("[corpus]\nplanets = 9\n")
        code = main(["gen-corpus", "--config", str(bad), "--out", str(tmp_path / "x")])
        assert code == EXIT_CONFIG


class TestTrain:
    def test_artifacts_written(self, workspace):
        run = workspace["run"]
        assert (run / "loss.csv").exists()
        assert (run / "checkpoint" / "manifest.json").exists()
        saved = json.loads((run / "config.json").read_text())
        assert saved["config_hash"]
        manifest = json.loads((run / "checkpoint" / "manifest.json").read_text())
        assert manifest["extra"]["corpus_hash"]
        assert manifest["extra"]["epoch"] == 0

    def test_epochs_zero_saves_untrained_checkpoint(self, workspace, tmp_path):
        run = tmp_path / "init"
        assert main(["train", "--config", str(workspace["config"]),
                     "--corpus", str(workspace["corpus"]), "--out", str(run),
                     "--epochs", "0"]) == 0
        manifest = json.loads((run / "checkpoint" / "manifest.json").read_text())
        assert manifest["extra"]["epoch"] == -1

    def test_resume_continues_from_saved_epoch(self, workspace, tmp_path):
        args = ["train", "--config", str(workspace["config"]),
                "--corpus", str(workspace["corpus"])]
        out = tmp_path / "resumed"
        assert main(args + ["--out", str(out), "--epochs", "1"]) == 0
        assert main(args + ["--out", str(out), "--epochs", "2", "--resume"]) == 0
        manifest = json.loads((out / "checkpoint" / "manifest.json").read_text())
        assert manifest["extra"]["epoch"] == 1
        # loss.csv covers both the restored and the new epoch
        lines = (out / "loss.csv").read_text().strip().splitlines()
        assert [line.split(",")[0] for line in lines[1:]] == ["0", "1"]

    def test_diverged_exits_3(self, workspace, tmp_path, monkeypatch):
        import anomsearch.cli as cli_mod

        def boom(*args, **kwargs):
            raise TrainingDiverged("non-finite loss at epoch 0, batch 0")

        monkeypatch.setattr(cli_mod, "train", boom)
        code = main(["train", "--config", str(workspace["config"]),
                     "--corpus", str(workspace["corpus"]),
                     "--out", str(tmp_path / "d")])
        assert code == EXIT_DIVERGED

    def test_missing_corpus_exits_1(self, workspace, tmp_path):
        code = main(["train", "--config", str(workspace["config"]),
                     "--corpus", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "r")])
        assert code == EXIT_IO


class TestEval:
    def test_report_schema_and_output_file(self, workspace, tmp_path, capsys):
        import jsonschema

        from anomsearch.evaluation import METRICS_REPORT_SCHEMA

        out = tmp_path / "metrics.json"
        code = main(["eval", "--checkpoint", str(workspace["run"] / "checkpoint"),
                     "--corpus", str(workspace["corpus"]),
                     "--setting", "behavior", "--shortlist-k", "4",
                     "--out", str(out)])
        assert code == 0
        report = json.loads(out.read_text())
        jsonschema.validate(report, METRICS_REPORT_SCHEMA)
        assert report["n_queries"] == 6  # test split only
        printed = json.loads(capsys.readouterr().out)
        assert printed == report

    def test_identity_setting(self, workspace, capsys):
        code = main(["eval", "--checkpoint", str(workspace["run"] / "checkpoint"),
                     "--corpus", str(workspace["corpus"]),
                     "--setting", "identity", "--shortlist-k", "4"])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert report["setting"] == "identity_match"

    def test_corpus_hash_mismatch_exits_4(self, workspace, tmp_path):
        other = tmp_path / "other_corpus"
        assert main(["gen-corpus", "--config", str(workspace["config"]),
                     "--seed", "123", "--out", str(other)]) == 0
        code = main(["eval", "--checkpoint", str(workspace["run"] / "checkpoint"),
                     "--corpus", str(other)])
        assert code == EXIT_HASH_MISMATCH

    def test_missing_checkpoint_exits_1(self, workspace, tmp_path):
        code = main(["eval", "--checkpoint", str(tmp_path / "nope"),
                     "--corpus", str(workspace["corpus"])])
        assert code == EXIT_IO


class TestSearch:
    def test_ranked_rows(self, workspace, capsys):
        code = main(["search", "--checkpoint", str(workspace["run"] / "checkpoint"),
                     "--corpus", str(workspace["corpus"]),
                     "--query", "a man falling in the park", "--top-k", "3"])
        assert code == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "rank,record_id,sim,itm_prob"
        assert len(lines) == 4
        assert lines[1].startswith("1,")

    def test_unknown_token_exits_5(self, workspace, capsys):
        code = main(["search", "--checkpoint", str(workspace["run"] / "checkpoint"),
                     "--corpus", str(workspace["corpus"]),
                     "--query", "a unicorn prancing"])
        assert code == EXIT_UNKNOWN_TOKENS
        assert "unicorn" in capsys.readouterr().err
