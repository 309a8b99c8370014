"""Checkpoint persistence: weights travel with the configuration that
built them.

Layout: magic "UNTF", format version, length-prefixed canonical-JSON
config plus its 64-bit FNV-1a hash, tensor count, then named tensor
records (see tensor.write_tensor_record).  Loading re-hashes the stored
JSON and refuses on mismatch, printing both hashes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .config import ModelConfig, config_hash
from .errors import CorruptionError
from .tensor import read_tensor_record, write_tensor_record

MAGIC = b"UNTF"
FORMAT_VERSION = 1


def _fnv1a(blob: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in blob:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def save_checkpoint(path, cfg: ModelConfig, tensors: dict[str, np.ndarray]) -> None:
    blob = cfg.canonical_json().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", _fnv1a(blob)))
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            write_tensor_record(fh, name, arr)


def _read_exact(fh, n: int, what: str) -> bytes:
    blob = fh.read(n)
    if len(blob) != n:
        raise CorruptionError(f"checkpoint truncated while reading {what}")
    return blob


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise CorruptionError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != FORMAT_VERSION:
            raise CorruptionError(f"{path}: unsupported checkpoint version {version}")
        (json_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        blob = _read_exact(fh, json_len, "config JSON")
        (stored_hash,) = struct.unpack("<Q", _read_exact(fh, 8, "config hash"))
        actual = _fnv1a(blob)
        if actual != stored_hash:
            raise CorruptionError(
                f"{path}: config hash mismatch; stored {stored_hash:016x}, "
                f"recomputed {actual:016x}")
        record = json.loads(blob.decode("utf-8"))
        record["band_edges"] = tuple(tuple(edge) for edge in record["band_edges"])
        cfg = ModelConfig(**record)
        cfg.validate()
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        try:
            for _ in range(count):
                name, arr = read_tensor_record(fh)
                tensors[name] = arr
        except EOFError as exc:
            raise CorruptionError(f"{path}: truncated tensor payload ({exc})") from exc
        if fh.read(1):
            raise CorruptionError(f"{path}: trailing bytes after the last tensor")
    return cfg, tensors


def checkpoint_hash(cfg: ModelConfig) -> int:
    return config_hash(cfg)
