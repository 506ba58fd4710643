import numpy as np
import pytest

from audiocap.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from audiocap.contrastive import ContrastiveConfig
from audiocap.data import generate
from audiocap.decoder import DecoderConfig
from audiocap.encoder import AudioHeadConfig, TextHeadConfig
from audiocap.model import CaptionModel, ModelConfig
from audiocap.tensor import Tensor
from audiocap.trainer import (Adam, NumericAbort, OptimizerState, RunLog,
                              StepRecord, TrainConfig, TrainerError, adam_step,
                              lr_schedule, predict_captions, train)


def small_model_config(vocab_size):
    return ModelConfig(
        audio=AudioHeadConfig(conv_channels=(2, 4), n_dual_path_blocks=1,
                              embed_len=8, dropout=0.1),
        text=TextHeadConfig(vocab_size=vocab_size, model_dim=8, n_layers=1,
                            n_heads=2, embed_len=8, dropout=0.1, max_len=32),
        decoder=DecoderConfig(vocab_size=vocab_size, model_dim=8, n_heads=2,
                              n_blocks=1, max_len=32, dropout=0.1, memory_len=8,
                              label_smoothing=0.1),
        contrastive=ContrastiveConfig(),
    )



def run_small(cfg, corpus, **kwargs):
    """train() on the module's small model config (vocab built from corpus)."""
    from audiocap.data import build_vocab
    vocab = build_vocab(corpus)
    return train(cfg, corpus, model_cfg=small_model_config(len(vocab)),
                 vocab=vocab, **kwargs)


@pytest.fixture(scope="module")
def small_corpus():
    return generate(seed=77, n_clips=6)


def quick_config(**overrides):
    base = dict(epochs=2, batch_size=3, lr_encoder=1e-4, lr_decoder=1e-3,
                warmup_epochs=1, alpha=0.2, lam=0.5, temperature=0.07, seed=11)
    base.update(overrides)
    return TrainConfig(**base)


class TestAdam:
    def test_zero_gradient_keeps_parameters(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = Adam([("p", p)])
        before = p.data.copy()
        for _ in range(5):
            p.grad = np.zeros(2)
            opt.step(0.1)
        np.testing.assert_array_equal(p.data, before)

    def test_first_step_magnitude(self):
        p = Tensor(np.array(0.0), requires_grad=True)
        opt = Adam([("p", p)])
        p.grad = np.array(1.0)
        opt.step(0.1)
        assert abs(p.data + 0.1) < 1e-8   # moved down by ~lr

    def test_converges_on_quadratic(self):
        p = Tensor(np.array(0.0), requires_grad=True)
        opt = Adam([("p", p)])
        for _ in range(200):
            p.grad = np.array(2.0 * (float(p.data) - 3.0))
            opt.step(0.05)
        assert abs(float(p.data) - 3.0) < 1e-2

    def test_nan_gradient_skips_step(self, caplog):
        p = Tensor(np.array(1.0), requires_grad=True)
        opt = Adam([("p", p)])
        p.grad = np.array(np.nan)
        with caplog.at_level("WARNING"):
            moved = opt.step(0.1)
        assert not moved
        assert p.data == 1.0
        assert opt.state.step_count == 0

    def test_shape_mismatch_rejected(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        state = OptimizerState([np.zeros(3)], [np.zeros(3)])
        with pytest.raises(TrainerError):
            adam_step([p], [np.zeros(4)], state, 0.1)


class TestLrSchedule:
    def test_linear_ramp(self):
        assert lr_schedule(0, 1e-3, 5) == 1e-3 * (1 / 5)
        assert lr_schedule(2, 1e-3, 5) == 1e-3 * (3 / 5)

    def test_ramp_end_and_tail(self):
        assert lr_schedule(4, 1e-3, 5) == 1e-3
        assert lr_schedule(39, 1e-3, 5) == 1e-3

    def test_no_warmup(self):
        assert lr_schedule(0, 1e-3, 0) == 1e-3


class TestRunLog:
    def test_monotone_append(self):
        log = RunLog()
        log.append(StepRecord(0, 0, 1, 1, 1, 0.1, 0.1, 0.5))
        log.append(StepRecord(0, 1, 1, 1, 1, 0.1, 0.1, 0.5))
        with pytest.raises(TrainerError):
            log.append(StepRecord(0, 1, 1, 1, 1, 0.1, 0.1, 0.5))

    def test_csv_header(self, tmp_path):
        log = RunLog()
        log.append(StepRecord(0, 0, 1.5, 2.5, 2.3, 1e-5, 1e-3, 0.25))
        out = tmp_path / "runlog.csv"
        log.to_csv(out)
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "epoch,step,l_cl,l_ce,l_total,lr_enc,lr_dec,diag_dom"
        assert lines[1].startswith("0,0,1.5,2.5,2.3")


class TestTrainLoop:
    def test_determinism_bitwise(self, small_corpus):
        cfg = quick_config()
        a = run_small(cfg, small_corpus)
        b = run_small(cfg, small_corpus)
        assert len(a.run_log.records) == len(b.run_log.records)
        for ra, rb in zip(a.run_log.records, b.run_log.records):
            assert ra == rb

    def test_alpha_zero_total_equals_ce_bitwise(self, small_corpus):
        cfg = quick_config(alpha=0.0)
        result = run_small(cfg, small_corpus)
        for rec in result.run_log.records:
            assert rec.l_total == rec.l_ce

    def test_warmup_lrs_logged_exactly(self, small_corpus):
        cfg = quick_config(epochs=4, warmup_epochs=3)
        result = run_small(cfg, small_corpus)
        for rec in result.run_log.records:
            expected = cfg.lr_decoder * min(1.0, (rec.epoch + 1) / 3)
            assert rec.lr_dec == expected

    def test_frozen_encoder_parameters_constant(self, small_corpus):
        cfg = quick_config(frozen_encoder=True, lr_encoder=1e-3)
        result = run_small(cfg, small_corpus)
        fresh = CaptionModel(result.model.config, result.vocab, seed=cfg.seed)
        for (name, trained), (_, init) in zip(result.model.encoder_named_params(),
                                              fresh.encoder_named_params()):
            np.testing.assert_array_equal(trained.data, init.data, err_msg=name)

    def test_trainable_encoder_parameters_move(self, small_corpus):
        cfg = quick_config(frozen_encoder=False, lr_encoder=1e-3)
        result = run_small(cfg, small_corpus)
        fresh = CaptionModel(result.model.config, result.vocab, seed=cfg.seed)
        moved = any(not np.array_equal(trained.data, init.data)
                    for (_, trained), (_, init) in zip(result.model.encoder_named_params(),
                                                       fresh.encoder_named_params()))
        assert moved

    def test_decoder_always_moves(self, small_corpus):
        result = run_small(quick_config(frozen_encoder=True), small_corpus)
        fresh = CaptionModel(result.model.config, result.vocab, seed=11)
        moved = any(not np.array_equal(t.data, i.data)
                    for (_, t), (_, i) in zip(result.model.decoder_named_params(),
                                              fresh.decoder_named_params()))
        assert moved

    def test_partial_batch_dropped_with_contrastive(self, small_corpus):
        cfg = quick_config(epochs=1, batch_size=4, alpha=0.2)
        result = run_small(cfg, small_corpus)      # 6 clips -> one batch of 4, tail dropped
        assert len(result.run_log.records) == 1

    def test_partial_batch_kept_without_contrastive(self, small_corpus):
        cfg = quick_config(epochs=1, batch_size=4, alpha=0.0)
        result = run_small(cfg, small_corpus)
        assert len(result.run_log.records) == 2

    def test_config_invariants(self):
        with pytest.raises(TrainerError):
            TrainConfig(alpha=0.2, batch_size=1)
        with pytest.raises(TrainerError):
            TrainConfig(warmup_epochs=50, epochs=40)
        with pytest.raises(TrainerError):
            TrainConfig(caption_selection="random")

    def test_numeric_abort_on_explosion(self, small_corpus):
        cfg = quick_config(lr_encoder=1e150, lr_decoder=1e150, epochs=3)
        with pytest.raises(NumericAbort):
            run_small(cfg, small_corpus)

    def test_empty_dataset_rejected(self):
        with pytest.raises(TrainerError):
            train(quick_config(), [])


class TestCheckpoint:
    def test_roundtrip_bitwise_and_inference_identical(self, small_corpus, tmp_path):
        cfg = quick_config(epochs=1)
        result = run_small(cfg, small_corpus, checkpoint_dir=tmp_path)
        assert result.last_checkpoint is not None
        before = predict_captions(result.model, small_corpus[:2], beam_size=3)
        loaded, opt_state, _ = load_checkpoint(result.last_checkpoint)
        for (name, orig), (_, back) in zip(result.model.named_params(),
                                           loaded.named_params()):
            np.testing.assert_array_equal(orig.data, back.data, err_msg=name)
        for (name, orig), (_, back) in zip(result.model.named_buffers(),
                                           loaded.named_buffers()):
            np.testing.assert_array_equal(orig, back, err_msg=name)
        assert opt_state is not None and set(opt_state) == {"encoder", "decoder"}
        after = predict_captions(loaded, small_corpus[:2], beam_size=3)
        assert before == after

    def test_optimizer_state_roundtrip_bitwise(self, small_corpus, tmp_path):
        from audiocap.trainer import Adam as AdamOpt
        cfg = quick_config(epochs=2)
        result = run_small(cfg, small_corpus, checkpoint_dir=tmp_path)
        _, opt_state, _ = load_checkpoint(result.last_checkpoint)
        live = AdamOpt(result.model.decoder_named_params())
        stored = opt_state["decoder"]["moments"]
        assert set(stored) == set(live.names)

    def test_corrupt_magic_rejected(self, tmp_path, small_corpus):
        cfg = quick_config(epochs=1)
        result = run_small(cfg, small_corpus, checkpoint_dir=tmp_path)
        raw = bytearray(result.last_checkpoint.read_bytes())
        raw[:4] = b"XXXX"
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(bad)

    def test_truncated_file_rejected(self, tmp_path, small_corpus):
        cfg = quick_config(epochs=1)
        result = run_small(cfg, small_corpus, checkpoint_dir=tmp_path)
        raw = result.last_checkpoint.read_bytes()
        cut = tmp_path / "cut.ckpt"
        cut.write_bytes(raw[:len(raw) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(cut)

    def test_mismatched_config_shape_error(self, tmp_path, small_corpus):
        cfg = quick_config(epochs=1)
        result = run_small(cfg, small_corpus, checkpoint_dir=tmp_path)
        other_cfg = small_model_config(len(result.vocab))
        other_cfg.audio.embed_len = 16
        other_cfg.text.embed_len = 16
        other_cfg.decoder.memory_len = 16
        other = CaptionModel(other_cfg, result.vocab, seed=0)
        with pytest.raises(CheckpointError, match="shape|unknown"):
            load_checkpoint(result.last_checkpoint, model=other)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "nope.ckpt")
