"""Binary file formats: parameter checkpoints, embedding archives, feature dumps.

All integers little-endian; all float payloads 32-bit little-endian.
"""
from __future__ import annotations

import struct
from typing import Dict, Iterable, Tuple

import numpy as np

CHECKPOINT_MAGIC = b"E2V2"
CHECKPOINT_VERSION = 1
EMBEDDING_MAGIC = b"EMB1"
FEATURE_MAGIC = b"FBK1"


class FormatError(ValueError):
    """Malformed or mismatched binary file content."""


class DataError(ValueError):
    """Referenced data (ids, paths) cannot be resolved."""


class ConfigError(ValueError):
    """Invalid configuration or usage."""


def _read(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(
            f"truncated file while reading {what} at byte offset {f.tell() - len(buf)}")
    return buf


# ------------------------------------------------------------ checkpoints
def save_checkpoint(path, entries: Iterable[Tuple[str, np.ndarray]]) -> None:
    """Write named tensors: magic, version u32, count u32, then per tensor
    u16 name length + UTF-8 name, u8 rank, u32 extents, float32 LE data."""
    entries = list(entries)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(entries)))
        for name, arr in entries:
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        magic = _read(f, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(
                f"bad checkpoint magic {magic!r} at byte offset 0, "
                f"expected {CHECKPOINT_MAGIC!r}")
        version, count = struct.unpack("<II", _read(f, 8, "header"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint format version {version}")
        out: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read(f, 2, "name length"))
            name = _read(f, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read(f, 1, "rank"))
            shape = struct.unpack(f"<{rank}I", _read(f, 4 * rank, "extents"))
            n = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(_read(f, 4 * n, f"data of {name}"), dtype="<f4")
            out[name] = data.reshape(shape).astype(np.float32)
    return out


# ------------------------------------------------------- embedding archives
def save_embeddings(path, entries: Iterable[Tuple[str, np.ndarray]]) -> None:
    """Write named vectors: magic, u32 count, u32 dim, then per record
    u16 name length + UTF-8 name + dim float32 LE."""
    entries = list(entries)
    dim = len(entries[0][1]) if entries else 0
    with open(path, "wb") as f:
        f.write(EMBEDDING_MAGIC)
        f.write(struct.pack("<II", len(entries), dim))
        for name, vec in entries:
            if len(vec) != dim:
                raise FormatError(
                    f"embedding {name!r} has dim {len(vec)}, archive dim is {dim}")
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(np.ascontiguousarray(vec, dtype="<f4").tobytes())


def load_embeddings(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        magic = _read(f, 4, "magic")
        if magic != EMBEDDING_MAGIC:
            raise FormatError(
                f"bad embedding archive magic {magic!r} at byte offset 0")
        count, dim = struct.unpack("<II", _read(f, 8, "header"))
        out: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read(f, 2, "name length"))
            name = _read(f, nlen, "name").decode("utf-8")
            vec = np.frombuffer(_read(f, 4 * dim, f"vector {name}"), dtype="<f4")
            out[name] = vec.astype(np.float32)
    return out


# ------------------------------------------------------------ feature dumps
def save_features(path, feats: np.ndarray) -> None:
    """Debug dump of a frames x dim feature matrix."""
    frames, dim = feats.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<II", frames, dim))
        f.write(np.ascontiguousarray(feats, dtype="<f4").tobytes())


def load_features(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = _read(f, 4, "magic")
        if magic != FEATURE_MAGIC:
            raise FormatError(f"bad feature dump magic {magic!r} at byte offset 0")
        frames, dim = struct.unpack("<II", _read(f, 8, "header"))
        data = np.frombuffer(_read(f, 4 * frames * dim, "feature data"), dtype="<f4")
    return data.reshape(frames, dim).astype(np.float32)
