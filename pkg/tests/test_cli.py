"""CLI behavior: stage wiring, exit codes, override flags, idempotence."""

import json
from pathlib import Path

import pytest

from spanfuse.cli import (
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_OK,
    EXIT_PIPELINE,
    ConfigError,
    RunConfig,
    main,
)
from spanfuse.corpus import load_jsonl
from spanfuse.toy import make_toy_corpus, record_toy_fixtures
from spanfuse.workflow import API_KEY_ENV


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Mini corpus, recorded fixtures, and a ready config template."""
    root = tmp_path_factory.mktemp("cliws")
    corpus = make_toy_corpus(n_train=6, n_test=3, seed=0)
    from spanfuse.corpus import save_jsonl

    save_jsonl(corpus.train, root / "train.jsonl")
    save_jsonl(corpus.test, root / "test.jsonl")
    record_toy_fixtures(corpus, root / "fixtures")
    return root


def write_config(workspace, tmp_path, **overrides) -> Path:
    data = {
        "out_dir": str(tmp_path / "run"),
        "train_path": str(workspace / "train.jsonl"),
        "test_path": str(workspace / "test.jsonl"),
        "tokenizer": "whitespace",
        "seed": 0,
        "llm": {"mode": "replay", "fixture_dir": str(workspace / "fixtures")},
        "encoder": {"dim": 16, "num_layers": 1, "num_heads": 2, "ffn_dim": 32, "max_len": 16},
        "head": {
            "projection_dim": 8,
            "biaffine_dim": 8,
            "biaffine_heads": 2,
            "attention_heads": 2,
            "window": 3,
        },
        "train": {
            "lr_encoder": 1e-3,
            "lr_head": 1e-3,
            "weight_decay": 1e-3,
            "beta": 1.0,
            "epochs": 2,
            "batch_size": 4,
            "seed": 0,
        },
    }
    data.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


@pytest.fixture()
def config_path(workspace, tmp_path):
    return write_config(workspace, tmp_path)


def run_dir(config_path) -> Path:
    return Path(json.loads(config_path.read_text())["out_dir"])


class TestConfig:
    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            RunConfig.from_dict({"out_dir": "x", "typo_key": 1})

    def test_unknown_nested_key_rejected(self):
        with pytest.raises(ConfigError, match="head"):
            RunConfig.from_dict({"out_dir": "x", "head": {"bogus": 3}})

    def test_bad_tokenizer_rejected(self):
        with pytest.raises(ConfigError, match="tokenizer"):
            RunConfig.from_dict({"out_dir": "x", "tokenizer": "bytes"})

    def test_replay_requires_fixture_dir(self, workspace, tmp_path):
        config = write_config(workspace, tmp_path, llm={"mode": "replay", "fixture_dir": None})
        assert main(["extract", "--config", str(config)]) == EXIT_CONFIG

    def test_bad_mode_rejected(self):
        with pytest.raises(ConfigError, match="llm.mode"):
            RunConfig.from_dict({"out_dir": "x", "llm": {"mode": "cached"}})

    def test_vocab_size_rejected(self):
        with pytest.raises(ConfigError, match="vocab_size"):
            RunConfig.from_dict({"out_dir": "x", "encoder": {"vocab_size": 50}})

    def test_round_trip(self, config_path):
        config = RunConfig.from_file(config_path)
        again = RunConfig.from_dict(config.to_dict())
        assert again == config

    def test_missing_config_flag(self):
        assert main(["extract"]) == EXIT_CONFIG

    def test_missing_config_file(self, tmp_path):
        assert main(["extract", "--config", str(tmp_path / "nope.json")]) == EXIT_IO


class TestStages:
    def test_extract_writes_outputs(self, config_path, capsys):
        assert main(["extract", "--config", str(config_path)]) == EXIT_OK
        out = run_dir(config_path)
        payload = json.loads((out / "extractions.json").read_text())
        assert set(payload) == {"ent", "seg", "pos", "stats"}
        assert (out / "runconfig.json").is_file()
        # printed counts match the artifact (summary equals recount)
        lines = capsys.readouterr().out.splitlines()
        for kind in ("ent", "seg", "pos"):
            total = sum(len(e["items"]) for e in payload[kind])
            assert any(line.startswith(f"{kind}: {total} items") for line in lines)

    def test_extract_idempotent(self, config_path):
        assert main(["extract", "--config", str(config_path)]) == EXIT_OK
        out = run_dir(config_path)
        first = (out / "extractions.json").read_bytes()
        assert main(["extract", "--config", str(config_path)]) == EXIT_OK
        assert (out / "extractions.json").read_bytes() == first

    def test_full_chain(self, config_path):
        for command in ("extract", "merge-labels", "fuse", "synthesize"):
            assert main([command, "--config", str(config_path)]) == EXIT_OK, command
        out = run_dir(config_path)
        mapping = json.loads((out / "mapping.json").read_text())["mapping"]
        assert mapping
        fusion = load_jsonl(out / "fusion.jsonl", tokenizer="whitespace")
        assert any(s.extension_spans for s in fusion)
        assert all(s.provenance == "fusion" for s in fusion)

        assert main(["train", "--config", str(config_path)]) == EXIT_OK
        trace = json.loads((out / "trace.json").read_text())
        assert len(trace["loss_trace"]) == 2
        checkpoint = out / trace["checkpoint"]
        assert checkpoint.is_file()
        assert checkpoint.name.endswith("-ep2.ckpt")

        assert (
            main(["annotate", "--config", str(config_path), "--checkpoint", str(checkpoint)])
            == EXIT_OK
        )
        synthetic = load_jsonl(out / "synthetic.jsonl", tokenizer="whitespace")
        assert synthetic
        assert all(s.provenance == "synthetic" for s in synthetic)

        assert (
            main(["evaluate", "--config", str(config_path), "--checkpoint", str(checkpoint)])
            == EXIT_OK
        )
        report = json.loads((out / "report.json").read_text())
        assert {"precision", "recall", "f1", "per_label"} <= set(report)

    def test_train_without_upstream_uses_train_path(self, config_path):
        assert main(["train", "--config", str(config_path)]) == EXIT_OK
        out = run_dir(config_path)
        assert (out / "trace.json").is_file()

    def test_train_beta_zero_without_synthetic(self, workspace, tmp_path):
        config = write_config(
            workspace,
            tmp_path,
            train={
                "lr_encoder": 1e-3,
                "lr_head": 1e-3,
                "weight_decay": 1e-3,
                "beta": 0.0,
                "epochs": 1,
                "batch_size": 4,
                "seed": 0,
            },
        )
        assert main(["train", "--config", str(config)]) == EXIT_OK

    def test_train_rerun_byte_identical(self, config_path):
        assert main(["train", "--config", str(config_path)]) == EXIT_OK
        out = run_dir(config_path)
        trace = json.loads((out / "trace.json").read_text())
        checkpoint = out / trace["checkpoint"]
        first = checkpoint.read_bytes()
        assert main(["train", "--config", str(config_path)]) == EXIT_OK
        assert checkpoint.read_bytes() == first

    def test_fuse_before_extract_fails(self, config_path):
        assert main(["fuse", "--config", str(config_path)]) == EXIT_IO

    def test_annotate_without_checkpoint(self, config_path):
        assert main(["synthesize", "--config", str(config_path)]) == EXIT_OK
        assert main(["annotate", "--config", str(config_path)]) == EXIT_CONFIG

    def test_evaluate_missing_checkpoint_file(self, config_path, tmp_path):
        missing = tmp_path / "gone.ckpt"
        assert (
            main(["evaluate", "--config", str(config_path), "--checkpoint", str(missing)])
            == EXIT_IO
        )


class TestSample:
    def test_kshot(self, config_path):
        assert main(["sample", "--config", str(config_path), "--k", "1"]) == EXIT_OK
        out = run_dir(config_path)
        samples = load_jsonl(out / "kshot-k1.jsonl", tokenizer="whitespace")
        assert samples

    def test_nested_sizes(self, config_path):
        assert main(["sample", "--config", str(config_path), "--sizes", "2,4"]) == EXIT_OK
        out = run_dir(config_path)
        small = (out / "subset-2.jsonl").read_text().splitlines()
        big = (out / "subset-4.jsonl").read_text().splitlines()
        assert len(small) == 2 and len(big) == 4
        assert big[:2] == small

    def test_requires_exactly_one_mode(self, config_path):
        assert main(["sample", "--config", str(config_path)]) == EXIT_CONFIG
        assert (
            main(["sample", "--config", str(config_path), "--k", "1", "--sizes", "2"])
            == EXIT_CONFIG
        )

    def test_bad_sizes_string(self, config_path):
        assert main(["sample", "--config", str(config_path), "--sizes", "2,x"]) == EXIT_CONFIG


class TestOverridesAndErrors:
    def test_seed_and_out_overrides(self, tmp_path, config_path):
        alt = tmp_path / "alt"
        assert (
            main(
                ["sample", "--config", str(config_path), "--k", "1", "--seed", "7", "--out", str(alt)]
            )
            == EXIT_OK
        )
        resolved = json.loads((alt / "runconfig.json").read_text())
        assert resolved["seed"] == 7
        assert resolved["train"]["seed"] == 7
        assert resolved["out_dir"] == str(alt)

    def test_mode_override_to_live_without_endpoint(self, config_path):
        assert main(["extract", "--config", str(config_path), "--mode", "live"]) == EXIT_CONFIG

    def test_live_without_api_key(self, workspace, tmp_path, monkeypatch):
        monkeypatch.delenv(API_KEY_ENV, raising=False)
        config = write_config(
            workspace,
            tmp_path,
            llm={"mode": "live", "endpoint": "http://localhost:1/v1", "model": "m"},
        )
        assert main(["extract", "--config", str(config)]) == EXIT_CONFIG

    def test_missing_dataset_file(self, workspace, tmp_path):
        config = write_config(workspace, tmp_path, train_path=str(tmp_path / "absent.jsonl"))
        assert main(["extract", "--config", str(config)]) == EXIT_IO

    def test_null_dataset_path(self, workspace, tmp_path):
        config = write_config(workspace, tmp_path, train_path=None)
        assert main(["extract", "--config", str(config)]) == EXIT_CONFIG

    def test_empty_fixture_dir_is_pipeline_failure(self, workspace, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        config = write_config(
            workspace, tmp_path, llm={"mode": "replay", "fixture_dir": str(empty)}
        )
        assert main(["extract", "--config", str(config)]) == EXIT_PIPELINE

    def test_malformed_config_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json", encoding="utf-8")
        assert main(["extract", "--config", str(path)]) == EXIT_CONFIG


class TestMakeToy:
    def test_writes_dataset(self, tmp_path):
        out = tmp_path / "toy"
        assert main(["make-toy", "--out", str(out), "--n-train", "6", "--n-test", "2"]) == EXIT_OK
        assert len((out / "train.jsonl").read_text().splitlines()) == 6
        assert len((out / "test.jsonl").read_text().splitlines()) == 2
        assert any((out / "fixtures").iterdir())

    def test_requires_out(self):
        assert main(["make-toy"]) == EXIT_CONFIG
