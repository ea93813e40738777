"""Configuration, checkpoint format, and end-to-end command behavior."""

import json

import numpy as np
import pytest

from pico.cli import (
    RunConfig,
    build_run_config,
    load_checkpoint,
    load_run_config,
    main,
    parse_config_text,
    save_checkpoint,
)
from pico.encoder import freeze
from pico.errors import CheckpointError, ContractError

from helpers import tiny_model

SMALL = [
    "--set", "model.vocab_size=40",
    "--set", "model.d_model=16",
    "--set", "model.n_layers=1",
    "--set", "model.d_ff=24",
    "--set", "model.d_kg=8",
    "--set", "model.expert_hidden=8",
    "--set", "corpus.n_benign=24",
    "--set", "corpus.n_direct=12",
    "--set", "corpus.n_puppetry=12",
    "--set", "corpus.user_len=3,6",
    "--set", "train.epochs=2",
    "--set", "train.warmup_epochs=1",
    "--set", "verify.trials=200",
]


class TestConfigParsing:
    def test_key_value_lines_with_comments(self):
        text = """
        # a comment
        seed = 42
        corpus.n_benign = 10   # trailing comment
        train.learning_rate = 0.01
        graph_path = none
        fractions = 0.8,0.1,0.1
        """
        values = parse_config_text(text)
        assert values["seed"] == 42
        assert values["corpus.n_benign"] == 10
        assert values["train.learning_rate"] == 0.01
        assert values["graph_path"] is None
        assert values["fractions"] == (0.8, 0.1, 0.1)

    def test_bad_line_rejected(self):
        with pytest.raises(ContractError):
            parse_config_text("not a key value line")

    def test_unknown_key_rejected(self):
        with pytest.raises(ContractError):
            build_run_config({"corpus.bogus": 1})
        with pytest.raises(ContractError):
            build_run_config({"nonsense": 1})

    def test_vocab_size_synced_between_sections(self):
        cfg = build_run_config({"model.vocab_size": 40})
        assert cfg.corpus.vocab_size == 40
        cfg = build_run_config({"corpus.vocab_size": 48})
        assert cfg.model.vocab_size == 48

    def test_master_seed_fans_out(self, tmp_path):
        cfg = load_run_config(None, [], seed=77, out=str(tmp_path))
        assert cfg.seed == 77
        assert cfg.corpus.seed == 77
        assert cfg.train.seed == 77

    def test_missing_config_file_rejected(self):
        with pytest.raises(ContractError):
            load_run_config("/does/not/exist.cfg", [], None, None)

    def test_missing_graph_path_rejected(self, tmp_path):
        with pytest.raises(ContractError):
            load_run_config(None, [f"graph_path={tmp_path}/missing.json"], None, None)

    def test_resolved_records_everything(self):
        flat = RunConfig().resolved()
        assert "train.learning_rate" in flat
        assert "corpus.n_benign" in flat
        assert "seed" in flat


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        model = tiny_model(31)
        freeze(model.system_encoder)
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(p1, model, meta={"k": 1})
        loaded, trailer = load_checkpoint(p1)
        for (n1, t1), (n2, t2) in zip(
            model.named_parameters().items(), loaded.named_parameters().items()
        ):
            assert n1 == n2
            assert np.array_equal(t1.data, t2.data)
            assert t1.requires_grad == t2.requires_grad
        assert loaded.system_encoder.frozen
        assert trailer["meta"] == {"k": 1}
        save_checkpoint(p2, loaded, meta={"k": 1})
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CheckpointError):
            load_checkpoint(p)

    def test_tampered_frozen_bytes_detected(self, tmp_path):
        model = tiny_model(32)
        freeze(model.system_encoder)
        p = tmp_path / "m.ckpt"
        save_checkpoint(p, model)
        blob = bytearray(p.read_bytes())
        # First record is a system_encoder tensor: name length at offset 12.
        name_len = int.from_bytes(blob[12:16], "little")
        name = bytes(blob[16 : 16 + name_len]).decode()
        assert name.startswith("system_encoder.")
        rank_off = 16 + name_len
        rank = int.from_bytes(blob[rank_off : rank_off + 4], "little")
        data_off = rank_off + 4 + 8 * rank
        blob[data_off + 3] ^= 0xFF
        p.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="hash|tamper"):
            load_checkpoint(p)

    def test_vocab_and_graph_restored(self, tmp_path):
        model = tiny_model(33)
        freeze(model.system_encoder)
        p = tmp_path / "m.ckpt"
        save_checkpoint(p, model)
        loaded, _ = load_checkpoint(p)
        assert loaded.vocab.tokens == model.vocab.tokens
        assert set(loaded.graph.nodes) == set(model.graph.nodes)


class TestCommands:
    def _args(self, tmp_path, seed=3):
        return ["--seed", str(seed), "--out", str(tmp_path)] + SMALL

    def test_gen_corpus_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["gen-corpus", "--seed", "3", "--out", str(a)] + SMALL) == 0
        assert main(["gen-corpus", "--seed", "3", "--out", str(b)] + SMALL) == 0
        for name in ("corpus_train.jsonl", "corpus_val.jsonl", "corpus_test.jsonl"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_gen_corpus_zero_counts(self, tmp_path):
        args = [
            "gen-corpus", "--seed", "1", "--out", str(tmp_path),
            "--set", "corpus.n_benign=0",
            "--set", "corpus.n_direct=0",
            "--set", "corpus.n_puppetry=0",
        ]
        assert main(args) == 0
        for name in ("corpus_train.jsonl", "corpus_val.jsonl", "corpus_test.jsonl"):
            assert (tmp_path / name).read_text() == ""

    def test_gen_corpus_line_counts_match_spec(self, tmp_path):
        assert main(["gen-corpus"] + self._args(tmp_path)) == 0
        total = 0
        for name in ("corpus_train.jsonl", "corpus_val.jsonl", "corpus_test.jsonl"):
            total += len((tmp_path / name).read_text().splitlines())
        assert total == 48

    def test_train_writes_checkpoint_and_report(self, tmp_path):
        assert main(["gen-corpus"] + self._args(tmp_path)) == 0
        assert main(["train"] + self._args(tmp_path)) == 0
        assert (tmp_path / "model.ckpt").exists()
        report = json.loads((tmp_path / "train_report.json").read_text())
        assert len(report["epochs"]) == 2
        assert report["seed"] == 3
        assert "config" in report

    def test_train_epochs_zero_equals_initialized_model(self, tmp_path):
        args = [
            "--seed", "4", "--out", str(tmp_path),
            *SMALL[:-4],  # drop epochs/warmup/trials overrides
            "--set", "train.epochs=0",
            "--set", "train.warmup_epochs=0",
            "--set", "verify.trials=200",
        ]
        assert main(["gen-corpus"] + args) == 0
        assert main(["train"] + args) == 0
        loaded, _ = load_checkpoint(tmp_path / "model.ckpt")

        from pico.config import substream
        from pico.corpus import Vocab
        from pico.model import PicoModel
        from pico.security import SecurityGraph

        vocab = Vocab.build(40)
        graph = SecurityGraph.load(tmp_path / "graph.json")
        cfg = loaded.config
        fresh = PicoModel.build(cfg, vocab, graph, substream(4, "init"))
        freeze(fresh.system_encoder)
        for (n1, t1), (n2, t2) in zip(
            loaded.named_parameters().items(), fresh.named_parameters().items()
        ):
            assert n1 == n2 and np.array_equal(t1.data, t2.data), n1

    def test_full_pipeline_eval_verify_attack(self, tmp_path):
        args = self._args(tmp_path, seed=5)
        assert main(["gen-corpus"] + args) == 0
        assert main(["train"] + args) == 0
        ckpt = str(tmp_path / "model.ckpt")
        assert main(["eval", "--checkpoint", ckpt] + args) == 0
        metrics = json.loads((tmp_path / "eval_metrics.json").read_text())
        assert metrics["leakage"]["ngram_violations"] == 0
        assert main(["verify", "--checkpoint", ckpt] + args) == 0
        reports = json.loads((tmp_path / "theorem_reports.json").read_text())
        assert len(reports["reports"]) == 3
        assert main(["attack", "--checkpoint", ckpt, "--scenario", "simple_injection"] + args) == 0
        transcript = json.loads((tmp_path / "attack_simple_injection.json").read_text())
        assert transcript["cases"][0]["signals"]["ckg"] >= 0.9

    def test_verify_fault_injection_nonzero_exit(self, tmp_path):
        args = self._args(tmp_path, seed=6)
        assert main(["gen-corpus"] + args) == 0
        assert main(["train"] + args) == 0
        ckpt = str(tmp_path / "model.ckpt")
        assert main(["verify", "--checkpoint", ckpt, "--fault-inject"] + args) == 1

    def test_eval_empty_test_split_exits_zero(self, tmp_path):
        args = [
            "--seed", "7", "--out", str(tmp_path),
            "--set", "corpus.n_benign=6",
            "--set", "corpus.n_direct=0",
            "--set", "corpus.n_puppetry=0",
            "--set", "corpus.vocab_size=40",
            "--set", "model.vocab_size=40",
            "--set", "model.d_model=16",
            "--set", "model.n_layers=1",
            "--set", "model.d_ff=24",
            "--set", "model.d_kg=8",
            "--set", "model.expert_hidden=8",
            "--set", "fractions=1.0,0.0,0.0",
            "--set", "train.epochs=0",
            "--set", "train.warmup_epochs=0",
        ]
        assert main(["gen-corpus"] + args) == 0
        assert main(["train"] + args) == 0
        ckpt = str(tmp_path / "model.ckpt")
        assert main(["eval", "--checkpoint", ckpt] + args) == 0
        metrics = json.loads((tmp_path / "eval_metrics.json").read_text())
        assert metrics["counts"] == {"benign": 0, "adversarial": 0}

    def test_unknown_scenario_usage_error(self, tmp_path):
        with pytest.raises(SystemExit):
            main(["attack", "--checkpoint", "x", "--scenario", "bogus"])

    def test_reproducible_training_and_checkpoints(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            args = ["--seed", "9", "--out", str(out)] + SMALL
            assert main(["gen-corpus"] + args) == 0
            assert main(["train"] + args) == 0
        ra = json.loads((a / "train_report.json").read_text())
        rb = json.loads((b / "train_report.json").read_text())
        assert abs(ra["final_loss"] - rb["final_loss"]) <= 1e-12
        assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()

    def test_shipped_desk_config_matches_defaults(self):
        from pathlib import Path

        from pico.cli import parse_config_text, build_run_config

        cfg_path = Path(__file__).parent.parent / "configs" / "desk.cfg"
        cfg = build_run_config(parse_config_text(cfg_path.read_text()))
        default = RunConfig()
        assert cfg.model == default.model
        assert cfg.train == default.train
        assert cfg.corpus.n_benign == default.corpus.n_benign
        assert cfg.fractions == default.fractions

    def test_config_file_drives_pipeline(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text(
            "# tiny run\n"
            "model.vocab_size = 40\n"
            "model.d_model = 16\n"
            "model.n_layers = 1\n"
            "model.d_ff = 24\n"
            "model.d_kg = 8\n"
            "model.expert_hidden = 8\n"
            "corpus.n_benign = 12\n"
            "corpus.n_direct = 6\n"
            "corpus.n_puppetry = 6\n"
            "seed = 13\n"
            f"out_dir = {tmp_path}/out\n"
        )
        assert main(["gen-corpus", "--config", str(cfg_file)]) == 0
        report = json.loads((tmp_path / "out" / "corpus_report.json").read_text())
        assert report["seed"] == 13
        total = sum(v["total"] for v in report["counts"].values())
        assert total == 24

    def test_eval_with_forced_gate(self, tmp_path):
        args = self._args(tmp_path, seed=12)
        assert main(["gen-corpus"] + args) == 0
        assert main(["train"] + args) == 0
        ckpt = str(tmp_path / "model.ckpt")
        assert main(["eval", "--checkpoint", ckpt, "--alpha", "1.0"] + args) == 0
        metrics = json.loads((tmp_path / "eval_metrics.json").read_text())
        assert metrics["gate"]["benign_alpha_mean"] == 1.0
        assert metrics["gate"]["adversarial_alpha_mean"] == 1.0

    def test_generate_command(self, tmp_path, capsys):
        args = self._args(tmp_path, seed=10)
        assert main(["gen-corpus"] + args) == 0
        assert main(["train"] + args) == 0
        ckpt = str(tmp_path / "model.ckpt")
        capsys.readouterr()  # drain earlier command output
        rc = main(
            ["generate", "--checkpoint", ckpt, "--system", "pfx0 sec0", "--user",
             "w00 inj_forget inj_reveal"] + args
        )
        assert rc == 0
        out = json.loads(capsys.readouterr().out)
        assert out["signals"]["ckg"] >= 0.9
