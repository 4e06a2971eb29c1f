"""Tests for the command line interface, run in-process through :func:`run`."""
from __future__ import annotations

import io
from contextlib import redirect_stderr, redirect_stdout
from unittest import mock

import pytest
from monty.serialization import dumpfn

from retroseq.cli import (
    RUN_CONFIG_NAME,
    RunConfig,
    _get_parser,
    get_run_config,
    load_model_and_database,
    run,
)
from retroseq.pipeline.data import load_pairs, write_pairs
from retroseq.pipeline.train import CHECKPOINT_NAME, METRICS_NAME, TrainConfig
from retroseq.retrieve.datastore import DatabaseMode, KeyKind, load
from retroseq.tests import RetroSeqTest
from retroseq.util import ConfigError, load_jsonl

TINY_MODEL_FLAGS = [
    "--d-model", "16",
    "--dropout", "0",
    "--set", "heads=2",
    "--set", "nl_layers=1",
    "--set", "neighbour_layers=1",
    "--set", "decoder_layers=3",
    "--set", "max_code_len=8",
]


def run_cli(*argv) -> tuple[int, str]:
    stdout = io.StringIO()
    with redirect_stdout(stdout), redirect_stderr(io.StringIO()):
        code = run([str(arg) for arg in argv])
    return code, stdout.getvalue()


class TestUsage(RetroSeqTest):
    """Class to test argument parsing and exit codes."""

    def test_usage_errors(self):
        assert run_cli()[0] == 1
        assert run_cli("frobnicate")[0] == 1
        assert run_cli("build-db", "--input", "pairs.jsonl")[0] == 1
        assert run_cli("synth", "--out", "x", "--pairs", "many")[0] == 1

    def test_help(self):
        code, output = run_cli("--help")
        assert code == 0
        for command in ("synth", "normalize", "build-db", "train", "generate", "evaluate"):
            assert command in output

        code, output = run_cli("build-db", "--help")
        assert code == 0
        assert "--chunk-size" in output
        assert "default: 8" in output

        code, output = run_cli("train", "--help")
        assert "default: 0.4" in output
        assert "default: 16" in output

    def test_data_errors(self):
        broken = self.get_temp_path("broken.jsonl")
        broken.write_text('{"intent": "x", "snippet": "y"}\nnot json\n')
        out = self.get_temp_path("db.rsdb")
        assert run_cli("build-db", "--input", broken, "--out", out, "-q")[0] == 2
        assert not out.exists()

        missing = self.get_temp_path("missing.rsdb")
        assert run_cli("inspect-db", "--db", missing)[0] == 2

        junk = self.get_temp_path("junk.rsdb")
        junk.write_bytes(b"junk" * 8)
        assert run_cli("inspect-db", "--db", junk)[0] == 2


class TestSynth(RetroSeqTest):
    """Class to test generating corpora from the command line."""

    def test_synth(self):
        first = self.get_temp_path("first")
        second = self.get_temp_path("second")
        code, output = run_cli("synth", "--pairs", 40, "--seed", 1, "--out", first, "-q")
        assert code == 0
        assert "32 train" in output
        assert len(load_pairs(first / "train.jsonl")) == 32
        assert len(load_pairs(first / "test.jsonl")) == 4
        assert len(load_pairs(first / "pool.jsonl")) == 40

        run_cli("synth", "--pairs", 40, "--seed", 1, "--out", second, "-q")
        for name in ("train", "dev", "test", "pool"):
            assert (first / f"{name}.jsonl").read_bytes() == (second / f"{name}.jsonl").read_bytes()


class TestDatabaseCommands(RetroSeqTest):
    """Class to test building and inspecting databases."""

    def setUp(self):
        self.pairs_file = self.get_temp_path("pairs.jsonl")
        write_pairs(self.pairs_file, self.get_pairs())
        self.db_file = self.get_temp_path("db.rsdb")

    def test_build_hybrid(self):
        code, output = run_cli(
            "build-db",
            "--input", self.pairs_file,
            "--chunk-size", 8,
            "--mode", "hybrid",
            "--normalize",
            "--out", self.db_file,
            "-q",
        )
        assert code == 0
        db = load(self.db_file)
        assert db.mode == DatabaseMode.HYBRID
        assert db.chunk_size == 8
        assert f"{len(db)} entries" in output

        code, output = run_cli(
            "overlap", "--db", self.db_file, "--test", self.pairs_file, "--normalize", "-q"
        )
        assert code == 0
        assert output.strip() == "1.0000"

    def test_overlap_disjoint(self):
        run_cli("build-db", "--input", self.pairs_file, "--chunk-size", 4, "--out", self.db_file)
        other = self.get_temp_path("other.jsonl")
        write_pairs(other, [("make a set", "alpha + beta * gamma")])
        code, output = run_cli("overlap", "--db", self.db_file, "--test", other, "-q")
        assert code == 0
        assert output.strip() == "0.0000"

    def test_append(self):
        first = self.get_temp_path("first.jsonl")
        second = self.get_temp_path("second.jsonl")
        write_pairs(first, self.get_pairs()[:8])
        write_pairs(second, self.get_pairs()[8:])
        run_cli("build-db", "--input", first, "--chunk-size", 4, "--out", self.db_file, "-q")
        before = load(self.db_file)

        extended = self.get_temp_path("extended.rsdb")
        code, _ = run_cli(
            "build-db", "--input", second, "--append-to", self.db_file, "--out", extended, "-q"
        )
        assert code == 0
        after = load(extended)
        assert len(after) > len(before)
        assert (after.keys[: len(before)] == before.keys).all()
        assert after.code_vocab == before.code_vocab

        code, _ = run_cli(
            "build-db",
            "--input", second,
            "--append-to", self.db_file,
            "--mode", "hybrid",
            "--out", extended,
            "-q",
        )
        assert code == 1

    def test_inspect(self):
        run_cli("build-db", "--input", self.pairs_file, "--chunk-size", 4, "--out", self.db_file)
        code, output = run_cli("inspect-db", "--db", self.db_file, "-n", 2)
        assert code == 0
        lines = output.splitlines()
        assert lines[0] == "mode: classic"
        assert "chunk_size: 4" in lines
        assert lines[-2].startswith("[0] code ")
        assert "mylist . sort ( | ) <pad> <pad> <pad>" in lines[-2]
        assert lines[-1].startswith("[1] code ")

    def test_normalize(self):
        out = self.get_temp_path("normalized.jsonl")
        code, _ = run_cli("normalize", "--input", self.pairs_file, "--out", out, "-q")
        assert code == 0
        records = load_jsonl(out)
        assert len(records) == len(self.get_pairs())
        assert records[0] == {
            "intent": "sort list var0 in place",
            "snippet": "var0.sort()",
            "substitutions": {"var0": "mylist"},
        }


class TestRunConfig(RetroSeqTest):
    """Class to test run configs."""

    def test_from_settings(self):
        config = RunConfig.from_settings(
            {"train_file": "train.jsonl", "training": {"epochs": 3, "model": {"d_model": 32}}}
        )
        assert config.training.epochs == 3
        assert config.out_dir == "run"

        with pytest.raises(ConfigError, match="unknown run settings: epochs"):
            RunConfig.from_settings({"epochs": 3})
        with pytest.raises(ConfigError, match="unknown training settings: depth"):
            RunConfig.from_settings({"training": {"depth": 3}})

    def test_file_round_trip(self):
        config = RunConfig("train.jsonl", None, "out", TrainConfig(model={"d_model": 32}, seed=4))
        filename = self.get_temp_path("config.json")
        dumpfn(config, filename)
        assert RunConfig.from_file(filename) == config

    def test_yaml_and_overrides(self):
        filename = self.get_temp_path("config.yaml")
        filename.write_text(
            "train_file: train.jsonl\n"
            "training:\n"
            "  epochs: 3\n"
            "  learning_rate: 0.01\n"
            "  model:\n"
            "    d_model: 32\n"
            "    heads: 4\n"
        )
        args = _get_parser().parse_args(
            ["train", "--config", str(filename), "--epochs", "5", "--seed", "2",
             "--d-model", "64", "--set", "aggregation=\"parallel\""]
        )
        config = get_run_config(args)
        assert config.train_file == "train.jsonl"
        assert config.training.epochs == 5
        assert config.training.learning_rate == 0.01
        assert config.training.seed == 2
        assert config.training.model == {"d_model": 64, "heads": 4, "aggregation": "parallel"}

    def test_bad_files(self):
        filename = self.get_temp_path("config.yaml")
        filename.write_text("train_file: train.jsonl\nsteps: 3\n")
        with pytest.raises(ConfigError, match="steps"):
            RunConfig.from_file(filename)
        assert run_cli("train", "--config", filename, "-q")[0] == 1

        filename.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError, match="mapping"):
            RunConfig.from_file(filename)

    def test_serialized_file_with_unknown_key(self):
        filename = self.get_temp_path("config.json")
        settings = RunConfig("train.jsonl", None, "out", TrainConfig()).as_dict()
        settings["steps"] = 3
        dumpfn(settings, filename)
        with pytest.raises(ConfigError, match="unknown run settings: steps"):
            RunConfig.from_file(filename)
        assert run_cli("train", "--config", filename, "-q")[0] == 1

        settings = RunConfig("train.jsonl", None, "out", TrainConfig()).as_dict()
        settings["training"]["depth"] = 3
        dumpfn(settings, filename)
        with pytest.raises(ConfigError, match="unknown training settings: depth"):
            RunConfig.from_file(filename)


class TestTrainAndDecode(RetroSeqTest):
    """Class to test training, generation and evaluation from the command line."""

    def setUp(self):
        self.pairs_file = self.get_temp_path("pairs.jsonl")
        write_pairs(self.pairs_file, self.get_pairs())
        self.db_file = self.get_temp_path("db.rsdb")
        self.out_dir = self.get_temp_path("run")
        run_cli(
            "build-db", "--input", self.pairs_file, "--chunk-size", 4, "--mode", "hybrid",
            "--out", self.db_file, "-q",
        )
        code, _ = run_cli(
            "train",
            "--train", self.pairs_file,
            "--db", self.db_file,
            "--out", self.out_dir,
            "--epochs", 1,
            "--batch-size", 8,
            "--max-steps", 2,
            "--learning-rate", 0.01,
            "--seed", 3,
            "-q",
            *TINY_MODEL_FLAGS,
        )
        assert code == 0
        self.model_file = self.out_dir / CHECKPOINT_NAME

    def test_outputs(self):
        assert self.model_file.exists()
        assert len(load_jsonl(self.out_dir / METRICS_NAME)) == 1
        config = RunConfig.from_file(self.out_dir / RUN_CONFIG_NAME)
        assert config.training.seed == 3
        assert config.training.database == str(self.db_file)
        assert config.training.model["d_model"] == 16

    def test_generate(self):
        argv = [
            "generate",
            "--model", self.model_file,
            "--db", self.db_file,
            "--intent", "sort list `mylist` in place",
            "--beam", 3,
            "-q",
        ]
        first_code, first = run_cli(*argv)
        second_code, second = run_cli(*argv)
        assert first_code == second_code == 0
        assert first == second

        code, _ = run_cli("generate", "--model", self.model_file, "--intent", "sort", "-q")
        assert code == 1

    def test_evaluate(self):
        records_file = self.get_temp_path("records.jsonl")
        code, output = run_cli(
            "evaluate",
            "--model", self.model_file,
            "--db", self.db_file,
            "--test", self.pairs_file,
            "--beam", 2,
            "--max-len", 6,
            "--workers", 2,
            "--out", records_file,
            "-q",
        )
        assert code == 0
        assert output.startswith("BLEU ")
        assert "16 examples" in output
        records = load_jsonl(records_file)
        assert [r["intent"] for r in records] == [intent for intent, _ in self.get_pairs()]

    def test_seed_reaches_index(self):
        with mock.patch("retroseq.cli.load", wraps=load) as loader:
            code, _ = run_cli(
                "generate",
                "--model", self.model_file,
                "--db", self.db_file,
                "--intent", "sort list `mylist` in place",
                "--index", "ivf",
                "--seed", 7,
                "-q",
            )
        assert code == 0
        assert loader.call_args.kwargs == {"index_backend": "ivf", "seed": 7}

        def get_centroids(seed):
            _, db = load_model_and_database(self.model_file, self.db_file, "ivf", seed)
            assert db.seed == seed
            index, _ = db._get_index(KeyKind.CODE)
            return index.centroids

        assert (get_centroids(1) == get_centroids(1)).all()

    def test_classic_database_rejected(self):
        classic = self.get_temp_path("classic.rsdb")
        run_cli("build-db", "--input", self.pairs_file, "--chunk-size", 4, "--out", classic, "-q")
        code, _ = run_cli(
            "generate", "--model", self.model_file, "--db", classic, "--intent", "sort", "-q"
        )
        assert code == 1
