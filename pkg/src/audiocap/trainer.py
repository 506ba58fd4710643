"""Two-group Adam training loop with warm-up, logging, and checkpoints.

The encoder (both heads) and the decoder get separate learning rates; a
linear warm-up ramps both over the first epochs.  Every step logs both
loss terms, the blended total, the group learning rates, and the mean
diagonal softmax mass of the batch similarity grid.  Runs are bitwise
deterministic in (seed, config, dataset).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict as dataclass_asdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .contrastive import (ContrastiveConfig, contrastive_loss,
                          cosine_similarity_matrix, diagonal_dominance)
from .data import PAD_ID, DatasetRecord, Vocabulary, build_vocab
from .decoder import LossWeights, caption_ce_loss, total_loss
from .model import CaptionModel, ModelConfig
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)


class TrainerError(ValueError):
    """Invalid training configuration or dataset."""


class NumericAbort(RuntimeError):
    """Training hit a non-finite loss; the last checkpoint on disk stands."""


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 8
    lr_encoder: float = 1e-5
    lr_decoder: float = 1e-3
    warmup_epochs: int = 5
    alpha: float = 0.2
    lam: float = 0.5
    temperature: float = 0.07
    seed: int = 0
    frozen_encoder: bool = False
    warmup_granularity: str = "epoch"     # "epoch" | "step"
    grad_clip: float = 5.0
    caption_selection: str = "fixed"      # "fixed" | "cycle"

    def __post_init__(self):
        if self.alpha > 0.0 and self.batch_size < 2:
            raise TrainerError("contrastive loss needs batch_size >= 2 for negatives")
        if self.warmup_epochs > self.epochs:
            raise TrainerError("warmup_epochs cannot exceed epochs")
        if self.warmup_granularity not in ("epoch", "step"):
            raise TrainerError("warmup_granularity must be 'epoch' or 'step'")
        if self.caption_selection not in ("fixed", "cycle"):
            raise TrainerError("caption_selection must be 'fixed' or 'cycle'")
        if not 0.0 <= self.alpha <= 1.0:
            raise TrainerError("alpha must lie in [0, 1]")


@dataclass
class OptimizerState:
    first_moments: list[np.ndarray]
    second_moments: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: list[Tensor], grads: list[np.ndarray],
              state: OptimizerState, lr: float) -> bool:
    """One bias-corrected Adam update in place; skipped (False) on NaN grads."""
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise TrainerError(f"gradient shape {g.shape} != parameter shape {p.shape}")
    if any(not np.all(np.isfinite(g)) for g in grads):
        log.warning("non-finite gradient; Adam step %d skipped", state.step_count + 1)
        return False
    state.step_count += 1
    bc1 = 1.0 - state.beta1 ** state.step_count
    bc2 = 1.0 - state.beta2 ** state.step_count
    for p, g, m, v in zip(params, grads, state.first_moments, state.second_moments):
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return True


class Adam:
    """Adam over a fixed parameter list, state exposed for checkpointing."""

    def __init__(self, named_params: list[tuple[str, Tensor]]):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.state = OptimizerState(
            [np.zeros_like(p.data) for p in self.params],
            [np.zeros_like(p.data) for p in self.params])

    def step(self, lr: float) -> bool:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for p in self.params]
        return adam_step(self.params, grads, self.state, lr)


def lr_schedule(epoch: int, base_lr: float, warmup_epochs: int) -> float:
    """Linear ramp over the warm-up window, constant afterwards."""
    if epoch < 0:
        raise TrainerError("epoch must be non-negative")
    if warmup_epochs <= 0:
        return base_lr
    return base_lr * min(1.0, (epoch + 1) / warmup_epochs)


@dataclass
class StepRecord:
    epoch: int
    step: int
    l_cl: float
    l_ce: float
    l_total: float
    lr_enc: float
    lr_dec: float
    diag_dom: float


@dataclass
class RunLog:
    records: list[StepRecord] = field(default_factory=list)

    HEADER = ("epoch", "step", "l_cl", "l_ce", "l_total", "lr_enc", "lr_dec", "diag_dom")

    def append(self, record: StepRecord) -> None:
        if self.records:
            last = self.records[-1]
            if (record.epoch, record.step) <= (last.epoch, last.step):
                raise TrainerError("run log must advance monotonically")
        self.records.append(record)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.HEADER)
            for r in self.records:
                writer.writerow([r.epoch, r.step, repr(r.l_cl), repr(r.l_ce),
                                 repr(r.l_total), repr(r.lr_enc), repr(r.lr_dec),
                                 repr(r.diag_dom)])

    def final_epoch_mean(self, attr: str) -> float:
        last = self.records[-1].epoch
        vals = [getattr(r, attr) for r in self.records if r.epoch == last]
        return float(np.mean(vals))


@dataclass
class TrainResult:
    model: CaptionModel
    run_log: RunLog
    vocab: Vocabulary
    last_checkpoint: Path | None
    best_checkpoint: Path | None


def _clip_global_norm(params: list[Tensor], max_norm: float,
                      epoch: int, step: int) -> None:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
        log.info("gradient norm %.3f clipped to %.1f at epoch %d step %d",
                 norm, max_norm, epoch, step)


def _batch_tokens(vocab: Vocabulary, captions: list[str]) -> np.ndarray:
    encoded = [vocab.encode(c) for c in captions]
    width = max(len(e) for e in encoded)
    ids = np.full((len(encoded), width), PAD_ID, dtype=np.intp)
    for i, e in enumerate(encoded):
        ids[i, :len(e)] = e
    return ids


def train(cfg: TrainConfig, records: list[DatasetRecord],
          model_cfg: ModelConfig | None = None,
          vocab: Vocabulary | None = None,
          checkpoint_dir=None) -> TrainResult:
    """Run the full optimization loop over an in-memory corpus."""
    from .checkpoint import save_checkpoint   # local import avoids a cycle

    if not records:
        raise TrainerError("dataset is empty")
    vocab = vocab if vocab is not None else build_vocab(records)
    if model_cfg is None:
        model_cfg = ModelConfig.desk_default(len(vocab))
    model_cfg = replace(model_cfg, contrastive=ContrastiveConfig(
        temperature=cfg.temperature, weight=cfg.lam,
        learnable_temperature=model_cfg.contrastive.learnable_temperature))
    longest = max(len(vocab.encode(c)) for r in records for c in r.captions)
    if model_cfg.decoder.max_len < longest:
        raise TrainerError(
            f"decoder max_len {model_cfg.decoder.max_len} shorter than the "
            f"longest caption ({longest} tokens)")

    model = CaptionModel(model_cfg, vocab, seed=cfg.seed)
    model.set_frozen(cfg.frozen_encoder)
    specs = [model.spectrogram(r.samples) for r in records]

    enc_adam = Adam(model.encoder_named_params())
    dec_adam = Adam(model.decoder_named_params())
    dropout_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))

    run_log = RunLog()
    weights = LossWeights(alpha=cfg.alpha)
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    last_path = best_path = None
    best_total = np.inf
    n_caps = min(len(r.captions) for r in records)
    global_step = 0
    warmup_steps = cfg.warmup_epochs * max(1, len(records) // cfg.batch_size)

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(records))
        batches = [order[i:i + cfg.batch_size]
                   for i in range(0, len(order), cfg.batch_size)]
        if cfg.alpha > 0.0:
            if len(batches) > 1 and len(batches[-1]) < cfg.batch_size:
                batches = batches[:-1]          # partial tail starves the negatives
            batches = [b for b in batches if len(b) >= 2]
        if not batches:
            raise TrainerError("no usable batches; shrink batch_size or add clips")
        epoch_totals = []
        for step_in_epoch, batch_ids in enumerate(batches):
            if cfg.warmup_granularity == "epoch":
                lr_enc = lr_schedule(epoch, cfg.lr_encoder, cfg.warmup_epochs)
                lr_dec = lr_schedule(epoch, cfg.lr_decoder, cfg.warmup_epochs)
            else:
                lr_enc = lr_schedule(global_step, cfg.lr_encoder, warmup_steps)
                lr_dec = lr_schedule(global_step, cfg.lr_decoder, warmup_steps)

            captions = []
            for idx in batch_ids:
                pick = (int(idx) if cfg.caption_selection == "fixed" else epoch) % n_caps
                captions.append(records[int(idx)].captions[pick])
            ids = _batch_tokens(vocab, captions)
            dec_input = ids[:, :-1]
            targets = ids[:, 1:]
            pad_mask = (targets != PAD_ID).astype(np.float64)

            try:
                audio = model.encode_audio([specs[int(i)] for i in batch_ids],
                                           training=True, dropout_rng=dropout_rng)
                text = model.encode_text(ids, training=True, dropout_rng=dropout_rng)
                sim = cosine_similarity_matrix(audio, text)
                l_cl = contrastive_loss(sim, model_cfg.contrastive,
                                        model.log_temperature)
                logits = model.decode(dec_input, audio, training=True,
                                      dropout_rng=dropout_rng)
                l_ce = caption_ce_loss(logits, targets, pad_mask,
                                       model_cfg.decoder.label_smoothing)
                l_tot = total_loss(l_cl, l_ce, weights)
            except NonFiniteError as err:
                raise NumericAbort(f"non-finite loss at epoch {epoch} "
                                   f"step {step_in_epoch}: {err}") from err
            if not np.isfinite(l_tot.data):
                raise NumericAbort(f"non-finite loss at epoch {epoch} step {step_in_epoch}")

            l_tot.backward()
            trainable = list(dec_adam.params)
            if not model.encoder_frozen:
                trainable += enc_adam.params
            if cfg.grad_clip > 0.0:
                _clip_global_norm(trainable, cfg.grad_clip, epoch, step_in_epoch)
            dec_adam.step(lr_dec)
            if not model.encoder_frozen:
                enc_adam.step(lr_enc)
            T.zero_grads(enc_adam.params)
            T.zero_grads(dec_adam.params)

            temp_now = (float(np.exp(model.log_temperature.data))
                        if model.log_temperature is not None else cfg.temperature)
            run_log.append(StepRecord(
                epoch=epoch, step=global_step,
                l_cl=l_cl.item(), l_ce=l_ce.item(), l_total=l_tot.item(),
                lr_enc=lr_enc, lr_dec=lr_dec,
                diag_dom=diagonal_dominance(sim, temp_now)))
            epoch_totals.append(l_tot.item())
            global_step += 1

        if checkpoint_dir is not None:
            checkpoint_dir.mkdir(parents=True, exist_ok=True)
            echo = dataclass_asdict(cfg)
            last_path = checkpoint_dir / "last.ckpt"
            save_checkpoint(last_path, model,
                            {"encoder": enc_adam, "decoder": dec_adam}, echo)
            epoch_mean = float(np.mean(epoch_totals))
            if epoch_mean < best_total:
                best_total = epoch_mean
                best_path = checkpoint_dir / "best.ckpt"
                save_checkpoint(best_path, model,
                                {"encoder": enc_adam, "decoder": dec_adam}, echo)

    return TrainResult(model, run_log, vocab, last_path, best_path)


def predict_captions(model: CaptionModel, records: list[DatasetRecord],
                     beam_size: int = 3) -> list[str]:
    """Beam-search one caption per record with the frozen model."""
    out = []
    for record in records:
        out.append(model.infer(record.samples, beam_size=beam_size))
    return out
