"""Token corpus files: a fixed header followed by row-major unsigned token grids.

Layout (little endian)::

    magic   4 bytes  b"NVQT"
    K       uint32   codebook size
    h, w    uint32   grid extent
    count   uint32   number of grids
    flags   uint32   bit 0 set when per-grid class ids follow the tokens
    tokens  count*h*w values, uint16 if K <= 65536 else uint32
    classes count int32 values (optional)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

MAGIC = b"NVQT"
_HEADER = struct.Struct("<4s5I")


@dataclass
class TokenCorpus:
    K: int
    grids: Tensor  # [count, h, w] int64
    class_ids: Tensor | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.grids.shape[1:])

    def sequences(self) -> Tensor:
        return self.grids.reshape(self.grids.shape[0], -1)


def _dtype(K: int):
    return np.dtype("<u2") if K <= 1 << 16 else np.dtype("<u4")


def save_tokens(path: Path | str, corpus: TokenCorpus) -> None:
    grids = corpus.grids.cpu().numpy()
    if grids.ndim != 3:
        raise ValueError("token grids must be [count, h, w]")
    if grids.size and (grids.min() < 0 or grids.max() >= corpus.K):
        raise ValueError(f"token ids outside [0, {corpus.K})")
    count, h, w = grids.shape
    flags = int(corpus.class_ids is not None)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, corpus.K, h, w, count, flags))
        f.write(grids.astype(_dtype(corpus.K)).tobytes())
        if flags:
            f.write(corpus.class_ids.cpu().numpy().astype("<i4").tobytes())


def load_tokens(path: Path | str) -> TokenCorpus:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, K, h, w, count, flags = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a token corpus")
    dt = _dtype(K)
    n = count * h * w
    off = _HEADER.size
    expected = off + n * dt.itemsize + (4 * count if flags & 1 else 0)
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(blob)}")
    grids = np.frombuffer(blob, dtype=dt, count=n, offset=off).astype(np.int64).reshape(count, h, w)
    classes = None
    if flags & 1:
        classes = torch.from_numpy(np.frombuffer(blob, dtype="<i4", count=count, offset=off + n * dt.itemsize).astype(np.int64))
    return TokenCorpus(K, torch.from_numpy(grids), classes)
