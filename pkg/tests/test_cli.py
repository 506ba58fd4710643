import json

import numpy as np
import pytest

from audiocap.cli import (EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE,
                          ConfigError, build_parser, main, parse_config_file)
from audiocap.data import generate, save_jsonl

TINY_CONFIG = """\
# desk-scale smoke configuration
seed = 3
epochs = 2
batch_size = 4
lr_encoder = 0.0001
lr_decoder = 0.001
warmup_epochs = 1
alpha = 0.2
lambda = 0.5
temperature = 0.07
label_smoothing = 0.1
dropout = 0.1
beam_size = 3
frozen_encoder = false
embed_len = 8
conv_channels = "2,4"
n_dual_path_blocks = 1
text_dim = 8
text_layers = 1
text_heads = 2
dec_dim = 8
dec_blocks = 1
dec_heads = 2
max_len = 24
"""


@pytest.fixture(scope="module")
def corpus_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "corpus.jsonl"
    save_jsonl(generate(seed=21, n_clips=8), path)
    return path


@pytest.fixture(scope="module")
def config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "run.toml"
    path.write_text(TINY_CONFIG)
    return path


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory, corpus_path, config_path):
    out_dir = tmp_path_factory.mktemp("run")
    code = main(["train", "--config", str(config_path), "--data", str(corpus_path),
                 "--out-dir", str(out_dir)])
    assert code == EXIT_OK
    return out_dir


class TestConfigFile:
    def test_missing_key_names_key_and_default(self, tmp_path):
        partial = tmp_path / "partial.toml"
        partial.write_text("seed = 1\n")
        with pytest.raises(ConfigError, match=r"'epochs' \(default 40\)"):
            parse_config_file(partial)

    def test_missing_key_exit_code(self, tmp_path, corpus_path, capsys):
        partial = tmp_path / "partial.toml"
        partial.write_text("seed = 1\n")
        code = main(["train", "--config", str(partial), "--data", str(corpus_path),
                     "--out-dir", str(tmp_path / "out")])
        assert code == EXIT_USAGE
        assert "missing config key" in capsys.readouterr().err

    def test_unknown_key_rejected(self, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text(TINY_CONFIG + "mystery_knob = 4\n")
        with pytest.raises(ConfigError, match="unknown config key"):
            parse_config_file(bad)

    def test_values_parse_types(self, config_path):
        cfg = parse_config_file(config_path)
        assert cfg["epochs"] == 2 and isinstance(cfg["epochs"], int)
        assert cfg["alpha"] == 0.2
        assert cfg["frozen_encoder"] is False
        assert cfg["conv_channels"] == "2,4"

    def test_duplicate_key_rejected(self, tmp_path):
        bad = tmp_path / "dup.toml"
        bad.write_text(TINY_CONFIG + "seed = 9\n")
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_file(bad)

    def test_help_lists_every_config_key(self):
        text = build_parser().format_help()
        from audiocap.cli import CONFIG_KEYS, OPTIONAL_KEYS
        for key, default, _ in CONFIG_KEYS + OPTIONAL_KEYS:
            assert key in text, key
            assert repr(default) in text


class TestGenData:
    def test_writes_corpus(self, tmp_path):
        out = tmp_path / "c.jsonl"
        assert main(["gen-data", "--seed", "4", "--clips", "4",
                     "--out", str(out)]) == EXIT_OK
        assert len(out.read_text().strip().splitlines()) == 4

    def test_same_seed_same_bytes(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        main(["gen-data", "--seed", "4", "--clips", "3", "--out", str(a)])
        main(["gen-data", "--seed", "4", "--clips", "3", "--out", str(b)])
        assert a.read_bytes() == b.read_bytes()


class TestTrain:
    def test_outputs_exist(self, trained_run):
        assert (trained_run / "last.ckpt").exists()
        assert (trained_run / "best.ckpt").exists()
        assert (trained_run / "runlog.csv").exists()
        manifest = json.loads((trained_run / "manifest.json").read_text())
        assert manifest["corpus_sha256"]
        assert manifest["config"]["epochs"] == 2
        assert manifest["checkpoints"]["last"].endswith("last.ckpt")
        assert manifest["tool_version"]

    def test_runlog_header(self, trained_run):
        first = (trained_run / "runlog.csv").read_text().splitlines()[0]
        assert first == "epoch,step,l_cl,l_ce,l_total,lr_enc,lr_dec,diag_dom"

    def test_numeric_abort_exit_code(self, tmp_path, corpus_path, capsys):
        cfg = tmp_path / "explode.toml"
        cfg.write_text(TINY_CONFIG.replace("lr_encoder = 0.0001", "lr_encoder = 1e150")
                       .replace("lr_decoder = 0.001", "lr_decoder = 1e150"))
        code = main(["train", "--config", str(cfg), "--data", str(corpus_path),
                     "--out-dir", str(tmp_path / "out")])
        assert code == EXIT_NUMERIC
        assert "numeric abort" in capsys.readouterr().err

    def test_missing_dataset_is_data_error(self, tmp_path, config_path, capsys):
        code = main(["train", "--config", str(config_path),
                     "--data", str(tmp_path / "nope.jsonl"),
                     "--out-dir", str(tmp_path / "out")])
        assert code == EXIT_DATA


class TestEval:
    def test_metric_csv_columns_and_determinism(self, trained_run, corpus_path, tmp_path):
        out1, out2 = tmp_path / "m1.csv", tmp_path / "m2.csv"
        assert main(["eval", "--checkpoint", str(trained_run / "last.ckpt"),
                     "--data", str(corpus_path), "--out", str(out1)]) == EXIT_OK
        assert main(["eval", "--checkpoint", str(trained_run / "last.ckpt"),
                     "--data", str(corpus_path), "--out", str(out2)]) == EXIT_OK
        lines = out1.read_text().strip().splitlines()
        assert lines[0] == "bleu1,bleu2,bleu3,bleu4,rouge_l,meteor_lite,cider"
        assert len(lines) == 2
        assert out1.read_bytes() == out2.read_bytes()

    def test_empty_test_set_is_error(self, trained_run, tmp_path, capsys):
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        code = main(["eval", "--checkpoint", str(trained_run / "last.ckpt"),
                     "--data", str(empty), "--out", str(tmp_path / "m.csv")])
        assert code == EXIT_DATA
        assert not (tmp_path / "m.csv").exists()

    def test_bad_checkpoint_is_data_error(self, tmp_path, corpus_path):
        fake = tmp_path / "fake.ckpt"
        fake.write_bytes(b"not a checkpoint at all")
        code = main(["eval", "--checkpoint", str(fake), "--data", str(corpus_path),
                     "--out", str(tmp_path / "m.csv")])
        assert code == EXIT_DATA


class TestInfer:
    def test_one_caption_per_record(self, trained_run, corpus_path, capsys):
        assert main(["infer", "--checkpoint", str(trained_run / "last.ckpt"),
                     "--data", str(corpus_path), "--beam-size", "2"]) == EXIT_OK
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 8


class TestSimmat:
    def test_outputs_and_row_sums(self, trained_run, corpus_path, tmp_path, capsys):
        prefix = tmp_path / "grid"
        assert main(["simmat", "--checkpoint", str(trained_run / "last.ckpt"),
                     "--data", str(corpus_path), "--out-prefix", str(prefix),
                     "--first", "8"]) == EXIT_OK
        csv_lines = (tmp_path / "grid.csv").read_text().strip().splitlines()
        assert csv_lines[0].startswith("# temperature=")
        rows = [list(map(float, line.split(","))) for line in csv_lines[1:]]
        assert len(rows) == 8
        for row in rows:
            assert abs(sum(row) - 1.0) < 1e-9
        pgm_lines = (tmp_path / "grid.pgm").read_text().splitlines()
        assert pgm_lines[0] == "P2"
        assert pgm_lines[1].startswith("# temperature=")
        assert pgm_lines[2] == "8 8" and pgm_lines[3] == "255"
        values = [int(v) for line in pgm_lines[4:] for v in line.split()]
        assert len(values) == 64 and all(0 <= v <= 255 for v in values)

    def test_untrained_model_is_near_uniform(self, corpus_path, config_path,
                                             tmp_path, capsys):
        frozen_cfg = tmp_path / "frozen.toml"
        frozen_cfg.write_text(TINY_CONFIG
                              .replace("lr_encoder = 0.0001", "lr_encoder = 0.0")
                              .replace("lr_decoder = 0.001", "lr_decoder = 0.0")
                              .replace("epochs = 2", "epochs = 1"))
        run_dir = tmp_path / "run0"
        assert main(["train", "--config", str(frozen_cfg), "--data", str(corpus_path),
                     "--out-dir", str(run_dir)]) == EXIT_OK
        prefix = tmp_path / "uniform"
        assert main(["simmat", "--checkpoint", str(run_dir / "last.ckpt"),
                     "--data", str(corpus_path), "--out-prefix", str(prefix),
                     "--first", "8"]) == EXIT_OK
        lines = (tmp_path / "uniform.csv").read_text().strip().splitlines()[1:]
        grid = np.array([[float(v) for v in line.split(",")] for line in lines])
        assert np.abs(grid - 1.0 / 8.0).max() < 0.15

    def test_fewer_than_two_clips_rejected(self, trained_run, corpus_path,
                                           tmp_path, capsys):
        code = main(["simmat", "--checkpoint", str(trained_run / "last.ckpt"),
                     "--data", str(corpus_path), "--out-prefix",
                     str(tmp_path / "x"), "--first", "1"])
        assert code == EXIT_DATA

    def test_unknown_clip_id_rejected(self, trained_run, corpus_path, tmp_path):
        code = main(["simmat", "--checkpoint", str(trained_run / "last.ckpt"),
                     "--data", str(corpus_path), "--out-prefix", str(tmp_path / "x"),
                     "--ids", "clip_0000,who_is_this"])
        assert code == EXIT_DATA


class TestUsage:
    def test_unknown_command_is_usage_error(self, capsys):
        assert main(["frobnicate"]) == EXIT_USAGE

    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == EXIT_OK
