"""Binary vector store shared by the embedding and taste-vector stages.

Layout (all little-endian):
  magic    4 bytes  b"S2V1"
  dim      uint32
  n_keys   uint32
  keys     n_keys x (uint32 byte length + utf-8 bytes)
  matrix   n_keys x dim float32, row-major

Keys are opaque strings; composite taste-vector keys join their parts with
the ASCII unit separator (0x1f).
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

MAGIC = b"S2V1"
KEY_SEP = "\x1f"


class StoreFormatError(RuntimeError):
    pass


def write_matrix(path: str | Path, keys: list[str], matrix: np.ndarray) -> None:
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2 or matrix.shape[0] != len(keys):
        raise ValueError(f"matrix shape {matrix.shape} does not match {len(keys)} keys")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", matrix.shape[1], len(keys)))
        for key in keys:
            encoded = key.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
        fh.write(matrix.tobytes())


def read_matrix(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise StoreFormatError(f"bad magic {magic!r} in {path}")
        dim, n_keys = struct.unpack("<II", fh.read(8))
        keys = []
        for _ in range(n_keys):
            (length,) = struct.unpack("<I", fh.read(4))
            keys.append(fh.read(length).decode("utf-8"))
        data = fh.read(n_keys * dim * 4)
        if len(data) != n_keys * dim * 4:
            raise StoreFormatError(f"truncated matrix in {path}")
        matrix = np.frombuffer(data, dtype="<f4").reshape(n_keys, dim)
    return keys, matrix.copy()


def write_matrix_csv(
    path: str | Path,
    keys: list[str],
    matrix: np.ndarray,
    delimiter: str = ",",
    key_header: str = "key",
) -> None:
    matrix = np.asarray(matrix)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter=delimiter)
        writer.writerow([key_header] + [f"v{i}" for i in range(matrix.shape[1])])
        for key, row in zip(keys, matrix):
            writer.writerow([key] + [repr(float(x)) for x in row])


def composite_key(*parts: str) -> str:
    return KEY_SEP.join(parts)


def split_key(key: str) -> list[str]:
    return key.split(KEY_SEP)
