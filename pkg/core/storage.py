"""Binary containers for checkpoints, datasets and text embeddings.

Layout (little-endian): magic, u32 entry count, then for each entry a u32
name length, the UTF-8 name, u32 rank, rank x u32 dims and the row-major
float64 values. Embedding files carry a 7-byte magic, u32 class count, u32 d,
the float64 rows, and a ``<file>.names.txt`` sidecar with one name per line.
"""
import logging
import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
import torch

from core.errors import SpecError

CHECKPOINT_MAGIC = b"SSMCKPT1"
DATASET_MAGIC = b"SSMDATA1"
EMBEDDING_MAGIC = b"SSMEMB1"

PathLike = Union[str, Path]


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    """Write to a temporary sibling, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def encode_container(magic: bytes, entries: Mapping[str, torch.Tensor]) -> bytes:
    parts = [magic, struct.pack("<I", len(entries))]
    for name, tensor in entries.items():
        encoded = name.encode("utf-8")
        values = tensor.detach().cpu().to(torch.float64).contiguous().numpy()
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", values.ndim))
        parts.append(struct.pack(f"<{values.ndim}I", *values.shape))
        parts.append(values.astype("<f8").tobytes())
    return b"".join(parts)


def decode_container(data: bytes, magic: bytes,
    dtypes: Optional[Mapping[str, torch.dtype]] = None) -> "OrderedDict[str, torch.Tensor]":
    """Inverse of :func:`encode_container`; ``dtypes`` restores integer entries."""
    if data[:len(magic)] != magic:
        raise SpecError(f"Bad container magic {data[:len(magic)]!r}, expected {magic!r}")
    offset = len(magic)

    def take(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(data):
            raise SpecError("Truncated container")
        values = struct.unpack_from(fmt, data, offset)
        offset += size
        return values

    (count,) = take("<I")
    entries: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for _ in range(count):
        (name_len,) = take("<I")
        name = data[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        if offset + 8 * n > len(data):
            raise SpecError(f"Truncated values for entry '{name}'")
        values = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(dims)
        offset += 8 * n
        tensor = torch.from_numpy(values.astype(np.float64))
        if dtypes and name in dtypes:
            tensor = tensor.to(dtypes[name])
        entries[name] = tensor
    if offset != len(data):
        raise SpecError(f"{len(data) - offset} trailing bytes after the last entry")
    return entries


def write_container(path: PathLike, magic: bytes, entries: Mapping[str, torch.Tensor]) -> Path:
    path = atomic_write_bytes(path, encode_container(magic, entries))
    logging.info(f"Wrote {len(entries)} tensors to {path}")
    return path


def read_container(path: PathLike, magic: bytes,
    dtypes: Optional[Mapping[str, torch.dtype]] = None) -> "OrderedDict[str, torch.Tensor]":
    with open(path, "rb") as f:
        return decode_container(f.read(), magic, dtypes)


# ----------------------------------------------------------------------
# Text embeddings
# ----------------------------------------------------------------------
def names_path(path: PathLike) -> Path:
    return Path(f"{path}.names.txt")


def write_embeddings(path: PathLike, names: List[str], rows: torch.Tensor) -> Path:
    if rows.dim() != 2 or rows.shape[0] != len(names):
        raise SpecError(f"{len(names)} names for an embedding matrix of shape {tuple(rows.shape)}")
    values = rows.detach().cpu().to(torch.float64).contiguous().numpy()
    data = EMBEDDING_MAGIC + struct.pack("<II", *values.shape) + values.astype("<f8").tobytes()
    atomic_write_text(names_path(path), "".join(f"{n}\n" for n in names))
    return atomic_write_bytes(path, data)


def read_embeddings(path: PathLike) -> Tuple[List[str], torch.Tensor]:
    with open(path, "rb") as f:
        data = f.read()
    head = len(EMBEDDING_MAGIC)
    if data[:head] != EMBEDDING_MAGIC:
        raise SpecError(f"{path}: not a text-embedding file")
    count, d = struct.unpack_from("<II", data, head)
    offset = head + 8
    if len(data) - offset != 8 * count * d:
        raise SpecError(f"{path}: expected {count} x {d} float64 values")
    rows = torch.from_numpy(np.frombuffer(data, dtype="<f8", offset=offset).reshape(count, d).astype(np.float64))
    with open(names_path(path), "r", encoding="utf-8") as f:
        names = [line.rstrip("\n") for line in f if line.strip()]
    if len(names) != count:
        raise SpecError(f"{names_path(path)}: {len(names)} names for {count} rows")
    return names, rows


def entries_with_prefix(entries: Mapping[str, torch.Tensor], prefix: str) -> Dict[str, torch.Tensor]:
    cut = len(prefix)
    return {name[cut:]: t for name, t in entries.items() if name.startswith(prefix)}
