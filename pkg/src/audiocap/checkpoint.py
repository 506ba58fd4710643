"""Versioned binary checkpoints: config echo, parameters, optimizer state.

Layout: magic bytes, format version, a JSON header (model config, vocab,
flags), then named float64 little-endian blobs for parameters, batch-norm
buffers, and per-group Adam state.  Round-trips are bitwise exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .contrastive import ContrastiveConfig
from .data import RESERVED_TOKENS, Vocabulary
from .decoder import DecoderConfig
from .encoder import AudioHeadConfig, TextHeadConfig
from .model import CaptionModel, ModelConfig

MAGIC = b"ACAPCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, truncated, or incompatible checkpoint file."""


def _model_config_dict(cfg: ModelConfig) -> dict:
    return {"audio": asdict(cfg.audio), "text": asdict(cfg.text),
            "decoder": asdict(cfg.decoder), "contrastive": asdict(cfg.contrastive),
            "frame_size": cfg.frame_size, "hop": cfg.hop}


def _model_config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(audio=AudioHeadConfig(**d["audio"]),
                       text=TextHeadConfig(**d["text"]),
                       decoder=DecoderConfig(**d["decoder"]),
                       contrastive=ContrastiveConfig(**d["contrastive"]),
                       frame_size=d["frame_size"], hop=d["hop"])


def _write_array(fh, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint file")
    return data


def _read_array(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, name_len).decode("utf-8")
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(ndim))
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").reshape(shape)
    return name, data.astype(np.float64)


def save_checkpoint(path, model: CaptionModel, optimizers: dict | None = None,
                    train_config: dict | None = None) -> None:
    """Serialize the model (and optionally Adam state) to ``path``."""
    params = model.named_params()
    buffers = model.named_buffers()
    header = {
        "format_version": FORMAT_VERSION,
        "tool_version": __version__,
        "model": _model_config_dict(model.config),
        "vocab": model.vocab.id_to_token[len(RESERVED_TOKENS):],
        "train_config": train_config,
        "has_optimizer": optimizers is not None,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for name, p in params:
            _write_array(fh, name, p.data)
        fh.write(struct.pack("<I", len(buffers)))
        for name, b in buffers:
            _write_array(fh, name, b)
        if optimizers is not None:
            fh.write(struct.pack("<I", len(optimizers)))
            for group, opt in sorted(optimizers.items()):
                enc = group.encode("utf-8")
                fh.write(struct.pack("<H", len(enc)))
                fh.write(enc)
                fh.write(struct.pack("<Q", opt.state.step_count))
                fh.write(struct.pack("<I", len(opt.names)))
                for name, m, v in zip(opt.names, opt.state.first_moments,
                                      opt.state.second_moments):
                    _write_array(fh, name + ".m", m)
                    _write_array(fh, name + ".v", v)


def load_checkpoint(path, model: CaptionModel | None = None):
    """Rebuild (or fill) a model from ``path``.

    Returns (model, optimizer_state, train_config_echo) where
    optimizer_state maps group -> {"step": int, "moments": {name: (m, v)}},
    or None when the file carries no optimizer section.  Passing a model
    validates shapes against it instead of building a fresh one.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if _read_exact(fh, len(MAGIC)) != MAGIC:
            raise CheckpointError("bad magic bytes; not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format version {version}")
        (header_len,) = struct.unpack("<I", _read_exact(fh, 4))
        header = json.loads(_read_exact(fh, header_len).decode("utf-8"))

        if model is None:
            config = _model_config_from_dict(header["model"])
            vocab = Vocabulary(header["vocab"])
            model = CaptionModel(config, vocab, seed=0)

        params = dict(model.named_params())
        (n_params,) = struct.unpack("<I", _read_exact(fh, 4))
        seen = set()
        for _ in range(n_params):
            name, data = _read_array(fh)
            if name not in params:
                raise CheckpointError(f"unknown parameter {name!r} in checkpoint")
            if params[name].shape != data.shape:
                raise CheckpointError(
                    f"shape mismatch for {name!r}: model {params[name].shape}, "
                    f"checkpoint {data.shape}")
            params[name].data = data.copy()
            seen.add(name)
        missing = sorted(set(params) - seen)
        if missing:
            raise CheckpointError(f"checkpoint missing parameters: {missing[:3]}")

        buffers = dict(model.named_buffers())
        (n_buffers,) = struct.unpack("<I", _read_exact(fh, 4))
        for _ in range(n_buffers):
            name, data = _read_array(fh)
            if name not in buffers:
                raise CheckpointError(f"unknown buffer {name!r} in checkpoint")
            buffers[name][...] = data

        optimizer_state = None
        if header.get("has_optimizer"):
            optimizer_state = {}
            (n_groups,) = struct.unpack("<I", _read_exact(fh, 4))
            for _ in range(n_groups):
                (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
                group = _read_exact(fh, name_len).decode("utf-8")
                (step_count,) = struct.unpack("<Q", _read_exact(fh, 8))
                (count,) = struct.unpack("<I", _read_exact(fh, 4))
                moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
                for _ in range(count):
                    m_name, m = _read_array(fh)
                    v_name, v = _read_array(fh)
                    base = m_name[:-2]
                    if v_name[:-2] != base:
                        raise CheckpointError("optimizer moment blobs out of order")
                    moments[base] = (m, v)
                optimizer_state[group] = {"step": step_count, "moments": moments}
    return model, optimizer_state, header.get("train_config")
