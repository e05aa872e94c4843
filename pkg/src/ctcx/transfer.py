"""Checkpoint files and recurrent-weight transfer between alphabets.

File layout: magic ``CTCX``, u32 version, u32 header length, UTF-8 JSON
header (model config, alphabet, tensor table with names/shapes/offsets),
zero padding to a 64-byte boundary, then raw little-endian float32 tensor
payloads in table order. Offsets are relative to the payload base.

Transfer copies every ``layer*`` tensor verbatim into a freshly built
target model and reinitializes only the dense head, whose row count is the
target alphabet's class count.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .network import (
    ModelConfig,
    ModelParams,
    init_params,
    named_tensors,
    recurrent_hidden_outputs,
    tensor_spec,
    validate_params,
)
from .text_labels import Alphabet

CHECKPOINT_MAGIC = b"CTCX"
CHECKPOINT_VERSION = 1
_ALIGN = 64


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


class TransferError(ValueError):
    """Transfer preconditions violated; nothing is copied."""


class TransferVerificationError(RuntimeError):
    """Copied layers do not reproduce the source activations."""


@dataclass
class Checkpoint:
    format_version: int
    model_config: ModelConfig
    alphabet_name: str
    alphabet_symbols: str
    tensors: list[tuple[str, np.ndarray]]  # float32 arrays in canonical order

    @property
    def alphabet(self) -> Alphabet:
        return Alphabet(self.alphabet_name, tuple(self.alphabet_symbols))


def _config_to_dict(cfg: ModelConfig) -> dict:
    return {
        "hidden": cfg.hidden,
        "num_layers": cfg.num_layers,
        "bidirectional": cfg.bidirectional,
        "feature_dim": cfg.feature_dim,
        "num_classes": cfg.num_classes,
    }


def _config_from_dict(d: dict) -> ModelConfig:
    try:
        return ModelConfig(
            feature_dim=int(d["feature_dim"]),
            num_classes=int(d["num_classes"]),
            hidden=int(d["hidden"]),
            num_layers=int(d["num_layers"]),
            bidirectional=bool(d["bidirectional"]),
        )
    except KeyError as e:
        raise CheckpointError(f"header config missing field {e}") from None


def checkpoint_from_params(
    params: ModelParams, cfg: ModelConfig, alphabet: Alphabet
) -> Checkpoint:
    validate_params(params, cfg)
    if alphabet.num_classes != cfg.num_classes:
        raise ValueError(
            f"alphabet {alphabet.name!r} has {alphabet.num_classes} classes, "
            f"config says {cfg.num_classes}"
        )
    tensors = [(name, np.asarray(arr, dtype="<f4")) for name, arr in named_tensors(params)]
    return Checkpoint(CHECKPOINT_VERSION, cfg, alphabet.name, "".join(alphabet.symbols), tensors)


def write_checkpoint(ckpt: Checkpoint, path) -> None:
    table = []
    offset = 0
    blobs = []
    for name, arr in ckpt.tensors:
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {
            "config": _config_to_dict(ckpt.model_config),
            "alphabet_name": ckpt.alphabet_name,
            "alphabet_symbols": ckpt.alphabet_symbols,
            "tensors": table,
        },
        ensure_ascii=False,
    ).encode("utf-8")
    prefix = CHECKPOINT_MAGIC + struct.pack("<II", ckpt.format_version, len(header)) + header
    pad = (-len(prefix)) % _ALIGN
    Path(path).write_bytes(prefix + b"\0" * pad + b"".join(blobs))


def save_checkpoint(params: ModelParams, cfg: ModelConfig, alphabet: Alphabet, path) -> None:
    """Serialize a model; float values are stored as float32."""
    write_checkpoint(checkpoint_from_params(params, cfg, alphabet), path)


def read_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, header_len = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if len(raw) < 12 + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header: {e}") from None

    cfg = _config_from_dict(header.get("config", {}))
    base = 12 + header_len
    base += (-base) % _ALIGN

    expected = tensor_spec(cfg)
    table = header.get("tensors", [])
    if [e["name"] for e in table] != [name for name, _ in expected]:
        raise CheckpointError(
            f"{path}: tensor table {[e['name'] for e in table]} does not match "
            f"the model config's tensor set"
        )
    tensors = []
    for entry, (name, shape) in zip(table, expected):
        got_shape = tuple(int(s) for s in entry["shape"])
        if got_shape != shape:
            raise CheckpointError(
                f"{path}: tensor {name} has shape {got_shape}, config requires {shape}"
            )
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = base + int(entry["offset"])
        end = start + 4 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated payload for tensor {name}")
        arr = np.frombuffer(raw[start:end], dtype="<f4").reshape(shape)
        tensors.append((name, arr))
    return Checkpoint(
        version,
        cfg,
        str(header.get("alphabet_name", "")),
        str(header.get("alphabet_symbols", "")),
        tensors,
    )


def params_from_checkpoint(ckpt: Checkpoint) -> ModelParams:
    params = init_params(ckpt.model_config)
    data = dict(ckpt.tensors)
    for name, arr in named_tensors(params):
        arr[...] = data[name].astype(np.float64)
    return params


def load_checkpoint(path, expect: ModelConfig | None = None):
    """Read a checkpoint; returns (params, config, alphabet_name).

    With ``expect`` given, every tensor shape is checked against the
    expected config and the first mismatch is reported by name.
    """
    ckpt = read_checkpoint(path)
    if expect is not None:
        want = dict(tensor_spec(expect))
        for name, arr in ckpt.tensors:
            if name not in want:
                raise CheckpointError(f"{path}: unexpected tensor {name}")
            if arr.shape != want[name]:
                raise CheckpointError(
                    f"{path}: tensor {name} has shape {arr.shape}, expected {want[name]}"
                )
    return params_from_checkpoint(ckpt), ckpt.model_config, ckpt.alphabet_name


@dataclass
class TransferReport:
    copied: tuple[str, ...]
    reinitialized: tuple[str, ...]
    skipped_reason: dict[str, str]

    def to_dict(self) -> dict:
        return {
            "copied": list(self.copied),
            "reinitialized": list(self.reinitialized),
            "skipped_reason": dict(self.skipped_reason),
        }


def transfer_weights(
    source: Checkpoint,
    target_cfg: ModelConfig,
    target_alphabet: Alphabet,
    seed: int,
) -> tuple[ModelParams, TransferReport]:
    """Copy the source's recurrent layers into a fresh target model.

    The dense head is never read from the source; it is reinitialized with
    the target alphabet's class count. Any recurrent shape mismatch aborts
    with no partial transfer.
    """
    src_cfg = source.model_config
    for field_name in ("hidden", "num_layers", "bidirectional", "feature_dim"):
        src_val = getattr(src_cfg, field_name)
        tgt_val = getattr(target_cfg, field_name)
        if src_val != tgt_val:
            raise TransferError(
                f"source {field_name}={src_val} does not match target {field_name}={tgt_val}"
            )
    if target_cfg.num_classes != target_alphabet.num_classes:
        raise TransferError(
            f"target config has {target_cfg.num_classes} classes but alphabet "
            f"{target_alphabet.name!r} needs {target_alphabet.num_classes}"
        )

    params = init_params(replace(target_cfg, seed=seed))
    target_tensors = dict(named_tensors(params))
    copied = []
    for name, arr in source.tensors:
        if not name.startswith("layer"):
            continue
        if target_tensors[name].shape != arr.shape:
            raise TransferError(
                f"recurrent tensor {name} has source shape {arr.shape}, "
                f"target shape {target_tensors[name].shape}"
            )
        target_tensors[name][...] = arr.astype(np.float64)
        copied.append(name)

    reason = (
        f"output dimension mismatch: source {src_cfg.num_classes} classes "
        f"!= target {target_cfg.num_classes} classes"
    )
    reinit = ("dense.w", "dense.b")
    report = TransferReport(tuple(copied), reinit, {name: reason for name in reinit})
    return params, report


@dataclass
class VerifyReport:
    max_abs_deviation: float
    first_divergence: str | None
    ok: bool

    def to_dict(self) -> dict:
        return {
            "max_abs_deviation": self.max_abs_deviation,
            "first_divergence": self.first_divergence,
            "ok": self.ok,
        }


def verify_transfer(
    source_params: ModelParams,
    transferred_params: ModelParams,
    cfg: ModelConfig,
    probe_features,
    post_training: bool = False,
) -> VerifyReport:
    """Check that both recurrent stacks produce identical hidden outputs.

    ``cfg`` describes the shared recurrent geometry (the dense heads may
    differ and are not run). Any nonzero deviation raises unless
    ``post_training`` is set, in which case it is only reported.
    """
    probes = [probe_features] if isinstance(probe_features, np.ndarray) else list(probe_features)
    # class counts may differ between the two heads; only the stacks are run
    src_cfg = replace(cfg, num_classes=source_params.dense_b.shape[0])
    tgt_cfg = replace(cfg, num_classes=transferred_params.dense_b.shape[0])
    max_dev = 0.0
    first = None
    for probe in probes:
        src_out = recurrent_hidden_outputs(source_params, src_cfg, probe)
        tgt_out = recurrent_hidden_outputs(transferred_params, tgt_cfg, probe)
        for li, (a, b) in enumerate(zip(src_out, tgt_out)):
            dev = float(np.max(np.abs(a - b))) if a.shape == b.shape else np.inf
            if dev > 0.0 and first is None:
                first = f"layer{li + 1}"
            max_dev = max(max_dev, dev)
    ok = max_dev == 0.0
    if not ok and not post_training:
        raise TransferVerificationError(
            f"hidden outputs diverge at {first}: max abs deviation {max_dev:g}"
        )
    return VerifyReport(max_dev, first, ok)
