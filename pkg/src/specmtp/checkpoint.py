"""Versioned binary checkpoint: header of key-value strings, named float32
tensor records, and a trailing 64-bit digest of the payload bytes."""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .model import ModelBundle, ModelConfig, init_model
from .sampler import SamplerHead, init_sampler

MAGIC = b"SMTP"
FORMAT_VERSION = 1
DTYPE_F32 = 0

_CONFIG_FIELDS = [
    ("vocab_size", int),
    ("d_model", int),
    ("n_layers", int),
    ("n_heads", int),
    ("d_ff", int),
    ("k_masks", int),
    ("lora_rank", int),
    ("max_position", int),
    ("tie_unembedding", bool),
    ("train_mask_embeddings", bool),
]


class CheckpointError(IOError):
    """Unreadable, corrupt, or incompatible checkpoint."""


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _digest(payloads: list[bytes]) -> int:
    h = hashlib.blake2b(digest_size=8)
    for p in payloads:
        h.update(p)
    return int.from_bytes(h.digest(), "little")


def save_checkpoint(
    model: ModelBundle,
    sampler: SamplerHead | None,
    path,
    extra_meta: dict[str, str] | None = None,
) -> None:
    """Serialize model (and sampler, when present) with meta key-values."""
    kv: dict[str, str] = {}
    for name, typ in _CONFIG_FIELDS:
        value = getattr(model.config, name)
        kv[f"config.{name}"] = str(int(value)) if typ is bool else str(value)
    kv["sampler"] = "1" if sampler is not None else "0"
    for k, v in (extra_meta or {}).items():
        kv[f"meta.{k}"] = str(v)

    records = list(model.named_params())
    if sampler is not None:
        records += sampler.named_params()

    payloads: list[bytes] = []
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", FORMAT_VERSION)
    out += struct.pack("<I", len(kv))
    for k in sorted(kv):
        out += _pack_str(k)
        out += _pack_str(kv[k])
    out += struct.pack("<I", len(records))
    for name, tensor in records:
        arr = np.ascontiguousarray(tensor.data, dtype="<f4")
        payload = arr.tobytes()
        payloads.append(payload)
        out += _pack_str(name)
        out += struct.pack("<BB", DTYPE_F32, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += payload
    out += struct.pack("<Q", _digest(payloads))
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint")
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u(self, fmt: str) -> int:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]

    def string(self) -> str:
        return self.take(self.u("<H")).decode("utf-8")


def _config_from_kv(kv: dict[str, str]) -> ModelConfig:
    args = {}
    for name, typ in _CONFIG_FIELDS:
        key = f"config.{name}"
        if key not in kv:
            raise CheckpointError(f"checkpoint header missing {key}")
        args[name] = bool(int(kv[key])) if typ is bool else typ(kv[key])
    return ModelConfig(**args)


def load_checkpoint(
    path, expected_config: ModelConfig | None = None
) -> tuple[ModelBundle, SamplerHead | None, dict[str, str]]:
    """Rebuild the bundle (and sampler, if saved). Returns stripped meta too.

    The payload digest is verified before any tensor is accepted. When
    expected_config is given, a field-by-field diff is raised on mismatch.
    """
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = r.u("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    kv = {}
    for _ in range(r.u("<I")):
        key = r.string()
        kv[key] = r.string()
    config = _config_from_kv(kv)
    if expected_config is not None and config != expected_config:
        diffs = [
            f"{name}: expected {getattr(expected_config, name)}, found {getattr(config, name)}"
            for name, _ in _CONFIG_FIELDS
            if getattr(expected_config, name) != getattr(config, name)
        ]
        raise CheckpointError("config mismatch: " + "; ".join(diffs))

    loaded: dict[str, np.ndarray] = {}
    payloads: list[bytes] = []
    for _ in range(r.u("<I")):
        name = r.string()
        tag = r.u("<B")
        if tag != DTYPE_F32:
            raise CheckpointError(f"unknown dtype tag {tag} for {name}")
        rank = r.u("<B")
        shape = tuple(r.u("<I") for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        payload = r.take(4 * count)
        payloads.append(payload)
        loaded[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    stored = r.u("<Q")
    if r.pos != len(r.blob):
        raise CheckpointError("trailing bytes after checksum")
    if stored != _digest(payloads):
        raise CheckpointError("payload checksum mismatch")

    model = init_model(config, seed=0)
    names = dict(model.named_params())
    sampler = init_sampler(config.d_model, seed=0) if kv.get("sampler") == "1" else None
    if sampler is not None:
        names.update(dict(sampler.named_params()))
    for name, tensor in names.items():
        if name not in loaded:
            raise CheckpointError(f"checkpoint is missing tensor {name}")
        arr = loaded.pop(name)
        if arr.shape != tensor.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: {arr.shape} vs {tensor.data.shape}"
            )
        tensor.data = arr
    if loaded:
        raise CheckpointError(f"unexpected tensors in checkpoint: {sorted(loaded)}")
    meta = {k[len("meta.") :]: v for k, v in kv.items() if k.startswith("meta.")}
    return model, sampler, meta
