"""Command line front end: gen-data, train, eval, infer, simmat.

Training is configured by a flat key=value file (strings quoted, numbers
and booleans bare); every key is required so a config file is a complete,
diffable record of a run.  All randomness flows from the single ``seed``
key.  Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
abort.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint
from .contrastive import (ContrastiveConfig, cosine_similarity_matrix,
                          row_softmax)
from .data import (DataError, build_vocab, generate, load_jsonl, normalize,
                   save_jsonl)
from .decoder import DecoderConfig
from .encoder import AudioHeadConfig, TextHeadConfig
from .metrics import EvalCorpus, EvalItem, MetricReport, MetricsError, evaluate
from .model import ModelConfig
from .tensor import no_grad
from .trainer import NumericAbort, TrainConfig, TrainerError, predict_captions, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(ValueError):
    """Missing, unknown, or unparseable config key."""


# (key, default, parser) -- order fixes --help and manifest output
CONFIG_KEYS = [
    ("seed", 0, int),
    ("epochs", 40, int),
    ("batch_size", 8, int),
    ("lr_encoder", 1e-5, float),
    ("lr_decoder", 1e-3, float),
    ("warmup_epochs", 5, int),
    ("alpha", 0.2, float),
    ("lambda", 0.5, float),
    ("temperature", 0.07, float),
    ("label_smoothing", 0.1, float),
    ("dropout", 0.2, float),
    ("beam_size", 3, int),
    ("frozen_encoder", False, bool),
]

OPTIONAL_KEYS = [
    ("embed_len", 64, int),
    ("conv_channels", "8,16,32", str),
    ("n_dual_path_blocks", 2, int),
    ("text_dim", 32, int),
    ("text_layers", 2, int),
    ("text_heads", 4, int),
    ("dec_dim", 32, int),
    ("dec_blocks", 2, int),
    ("dec_heads", 4, int),
    ("max_len", 24, int),
    ("frame_size", 256, int),
    ("hop", 128, int),
    ("warmup_granularity", "epoch", str),
    ("grad_clip", 5.0, float),
    ("caption_selection", "fixed", str),
    ("learnable_temperature", False, bool),
]


def _parse_value(raw: str, lineno: int):
    raw = raw.strip()
    if raw.startswith('"') and raw.endswith('"') and len(raw) >= 2:
        return raw[1:-1]
    if raw in ("true", "false"):
        return raw == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"line {lineno}: cannot parse value {raw!r}") from None


def parse_config_file(path) -> dict:
    """Flat key = value lines; '#' comments; strings quoted, numbers/bools bare."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    known = {k for k, _, _ in CONFIG_KEYS} | {k for k, _, _ in OPTIONAL_KEYS}
    out: dict = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in text.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        out[key] = _parse_value(raw, lineno)
    for key, default, _ in CONFIG_KEYS:
        if key not in out:
            raise ConfigError(f"missing config key {key!r} (default {default!r})")
    for key, default, _ in OPTIONAL_KEYS:
        out.setdefault(key, default)
    return out


def build_configs(cfg: dict, vocab_size: int) -> tuple[TrainConfig, ModelConfig]:
    channels = tuple(int(c) for c in str(cfg["conv_channels"]).split(","))
    model_cfg = ModelConfig(
        audio=AudioHeadConfig(conv_channels=channels,
                              n_dual_path_blocks=cfg["n_dual_path_blocks"],
                              embed_len=cfg["embed_len"], dropout=cfg["dropout"]),
        text=TextHeadConfig(vocab_size=vocab_size, model_dim=cfg["text_dim"],
                            n_layers=cfg["text_layers"], n_heads=cfg["text_heads"],
                            embed_len=cfg["embed_len"], dropout=cfg["dropout"],
                            max_len=cfg["max_len"] + 8),
        decoder=DecoderConfig(vocab_size=vocab_size, model_dim=cfg["dec_dim"],
                              n_heads=cfg["dec_heads"], n_blocks=cfg["dec_blocks"],
                              max_len=cfg["max_len"], dropout=cfg["dropout"],
                              label_smoothing=cfg["label_smoothing"],
                              memory_len=cfg["embed_len"]),
        contrastive=ContrastiveConfig(
            temperature=cfg["temperature"], weight=cfg["lambda"],
            learnable_temperature=cfg["learnable_temperature"]),
        frame_size=cfg["frame_size"], hop=cfg["hop"])
    train_cfg = TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"],
        lr_encoder=cfg["lr_encoder"], lr_decoder=cfg["lr_decoder"],
        warmup_epochs=cfg["warmup_epochs"], alpha=cfg["alpha"], lam=cfg["lambda"],
        temperature=cfg["temperature"], seed=cfg["seed"],
        frozen_encoder=cfg["frozen_encoder"],
        warmup_granularity=cfg["warmup_granularity"], grad_clip=cfg["grad_clip"],
        caption_selection=cfg["caption_selection"])
    return train_cfg, model_cfg


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


# -- subcommands ------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    records = generate(seed=args.seed, n_clips=args.clips)
    save_jsonl(records, args.out)
    print(f"wrote {len(records)} clips ({sum(len(r.captions) for r in records)} "
          f"captions) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = parse_config_file(args.config)
    records = load_jsonl(args.data)
    vocab = build_vocab(records)
    train_cfg, model_cfg = build_configs(cfg, len(vocab))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = train(train_cfg, records, model_cfg=model_cfg, vocab=vocab,
                   checkpoint_dir=out_dir)
    runlog_path = out_dir / "runlog.csv"
    result.run_log.to_csv(runlog_path)
    manifest = {
        "tool_version": __version__,
        "config": cfg,
        "config_path": str(args.config),
        "dataset_path": str(args.data),
        "corpus_sha256": _sha256(args.data),
        "checkpoints": {
            "last": str(result.last_checkpoint),
            "best": str(result.best_checkpoint),
        },
        "run_log_csv": str(runlog_path),
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    final_ce = result.run_log.final_epoch_mean("l_ce")
    print(f"trained {train_cfg.epochs} epochs; final epoch mean l_ce {final_ce:.4f}; "
          f"manifest {manifest_path}")
    return EXIT_OK


def _load_model(checkpoint_path):
    model, _, train_echo = load_checkpoint(checkpoint_path)
    return model, train_echo


def cmd_eval(args) -> int:
    model, _ = _load_model(args.checkpoint)
    records = load_jsonl(args.data)
    if not records:
        raise DataError("test set is empty; nothing to evaluate")
    captions = predict_captions(model, records, beam_size=args.beam_size)
    corpus = EvalCorpus([
        EvalItem(normalize(cand), [normalize(ref) for ref in record.captions])
        for cand, record in zip(captions, records)])
    report = evaluate(corpus)
    out = Path(args.out)
    with open(out, "w") as fh:
        fh.write(",".join(MetricReport.CSV_COLUMNS) + "\n")
        fh.write(",".join(repr(getattr(report, c)) for c in MetricReport.CSV_COLUMNS) + "\n")
    print(f"evaluated {len(records)} clips -> {out}")
    for col in MetricReport.CSV_COLUMNS:
        print(f"  {col}: {getattr(report, col):.4f}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model, _ = _load_model(args.checkpoint)
    records = load_jsonl(args.data)
    for record in records:
        print(model.infer(record.samples, beam_size=args.beam_size))
    return EXIT_OK


def cmd_simmat(args) -> int:
    model, train_echo = _load_model(args.checkpoint)
    records = load_jsonl(args.data)
    if args.ids:
        wanted = args.ids.split(",")
        by_id = {r.clip_id: (i, r) for i, r in enumerate(records)}
        missing = [w for w in wanted if w not in by_id]
        if missing:
            raise DataError(f"clip ids not in dataset: {missing}")
        picked = [by_id[w] for w in wanted]
    else:
        picked = list(enumerate(records[:args.first]))
    if len(picked) < 2:
        raise DataError("similarity matrix needs at least 2 clips")
    selection = (train_echo or {}).get("caption_selection", "fixed")
    specs = [model.spectrogram(r.samples) for _, r in picked]
    ids_rows = []
    for idx, record in picked:
        pick = (idx if selection == "fixed" else 0) % len(record.captions)
        ids_rows.append(model.vocab.encode(record.captions[pick]))
    width = max(len(row) for row in ids_rows)
    token_mat = np.zeros((len(ids_rows), width), dtype=np.intp)
    for i, row in enumerate(ids_rows):
        token_mat[i, :len(row)] = row
    with no_grad():
        audio = model.encode_audio(specs, training=False)
        text = model.encode_text(token_mat, training=False)
        sim = cosine_similarity_matrix(audio, text)
    temperature = model.config.contrastive.temperature
    probs = row_softmax(sim, temperature)
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    csv_path = prefix.with_suffix(".csv")
    with open(csv_path, "w") as fh:
        fh.write(f"# temperature={temperature!r}\n")
        for row in probs:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    pgm_path = prefix.with_suffix(".pgm")
    levels = np.clip(np.rint(probs * 255.0), 0, 255).astype(int)
    with open(pgm_path, "w") as fh:
        fh.write("P2\n")
        fh.write(f"# temperature={temperature!r}\n")
        fh.write(f"{levels.shape[1]} {levels.shape[0]}\n255\n")
        for row in levels:
            fh.write(" ".join(str(v) for v in row) + "\n")
    diag = float(np.mean(np.diag(probs)))
    print(f"wrote {csv_path} and {pgm_path}; mean diagonal mass {diag:.4f}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------------


def _config_help() -> str:
    lines = ["config file keys (all required, key = value per line):"]
    for key, default, _ in CONFIG_KEYS:
        lines.append(f"  {key} (default {default!r})")
    lines.append("optional keys:")
    for key, default, _ in OPTIONAL_KEYS:
        lines.append(f"  {key} (default {default!r})")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="audiocap",
        description="Desk-scale contrastive audio captioning pipeline.",
        epilog=_config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a deterministic synthetic corpus")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--clips", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a JSONL corpus",
                       epilog=_config_help(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", required=True, help="flat key=value config file")
    p.add_argument("--data", required=True, help="training corpus JSONL")
    p.add_argument("--out-dir", required=True, help="run directory for checkpoints/logs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score beam-search captions against references")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--beam-size", type=int, default=3)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="print one caption per dataset record")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--beam-size", type=int, default=3)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("simmat", help="emit the row-softmaxed similarity matrix")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-prefix", required=True, help="writes <prefix>.csv and <prefix>.pgm")
    p.add_argument("--ids", help="comma-separated clip ids (default: first N records)")
    p.add_argument("--first", type=int, default=8)
    p.set_defaults(func=cmd_simmat)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_err:
        # argparse uses exit code 2 for usage errors; 0 for --help/--version
        return EXIT_OK if exit_err.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, TrainerError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except NumericAbort as err:
        print(f"numeric abort: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, MetricsError, OSError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
