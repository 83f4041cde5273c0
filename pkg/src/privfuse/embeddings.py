"""Embedding tables and their on-disk formats.

Text format (words, users, fused outputs)::

    # optional provenance comment lines
    n d
    id v_1 ... v_d

Checkpoint container (encoder / mapping / fusion parameters), little-endian::

    b"PFCK" | u16 version | u32 header length | JSON header | float32 blobs

The JSON header holds the provenance and a shape table
``[{"name": ..., "shape": [...]}, ...]`` giving the order of the blobs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

MAGIC = b"PFCK"
CONTAINER_VERSION = 1


class EmbeddingFormatError(ValueError):
    def __init__(self, path, lineno, msg):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {msg}")


@dataclass(frozen=True)
class EmbeddingTable:
    ids: tuple[str, ...]
    vectors: np.ndarray

    def __post_init__(self):
        vec = np.asarray(self.vectors, dtype=float)
        if vec.ndim != 2 or vec.shape[0] != len(self.ids):
            raise ValueError(f"expected {len(self.ids)} rows of vectors, got shape {vec.shape}")
        if vec.shape[1] < 1:
            raise ValueError("embedding dimension must be at least 1")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("embedding ids must be unique")
        vec.setflags(write=False)
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "vectors", vec)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    @cached_property
    def _index(self) -> dict[str, int]:
        return {k: i for i, k in enumerate(self.ids)}

    def index(self) -> dict[str, int]:
        return self._index

    def rows(self, ids: Sequence[str]) -> np.ndarray:
        idx = self.index()
        return self.vectors[[idx[i] for i in ids]]


class WordEmbeddingTable(EmbeddingTable):
    """Vocabulary plus the injection ``phi`` of each word into R^d."""

    @property
    def vocabulary(self) -> tuple[str, ...]:
        return self.ids

    def phi(self, word: str) -> np.ndarray:
        return self.vectors[self.index()[word]]


def _fmt(x: float) -> str:
    return repr(float(x))


def save_embeddings(table: EmbeddingTable, path: str | Path, header: Mapping | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write("# " + json.dumps(dict(header), sort_keys=True) + "\n")
        fh.write(f"{len(table)} {table.dim}\n")
        for key, row in zip(table.ids, table.vectors):
            if any(ch.isspace() for ch in key):
                raise ValueError(f"embedding id {key!r} contains whitespace")
            fh.write(key + " " + " ".join(_fmt(v) for v in row) + "\n")


def read_header(path: str | Path) -> dict:
    """Provenance stored in the leading comment line, or ``{}``."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if first.startswith("# "):
        return json.loads(first[2:])
    return {}


def load_embeddings(path: str | Path, cls: type[EmbeddingTable] = EmbeddingTable) -> EmbeddingTable:
    ids: list[str] = []
    rows: list[list[float]] = []
    n = d = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.startswith("#"):
                continue
            parts = line.split()
            if not parts:
                continue
            if n is None:
                if len(parts) != 2:
                    raise EmbeddingFormatError(path, lineno, "expected header line 'n d'")
                try:
                    n, d = int(parts[0]), int(parts[1])
                except ValueError:
                    raise EmbeddingFormatError(path, lineno, "expected integers in header line 'n d'") from None
                continue
            if len(parts) != d + 1:
                raise EmbeddingFormatError(path, lineno, f"expected id and {d} values, got {len(parts) - 1} values")
            try:
                rows.append([float(v) for v in parts[1:]])
            except ValueError:
                raise EmbeddingFormatError(path, lineno, "non-numeric embedding value") from None
            ids.append(parts[0])
    if n is None:
        raise EmbeddingFormatError(path, 1, "empty embedding file")
    if len(ids) != n:
        raise EmbeddingFormatError(path, lineno, f"header announces {n} rows, found {len(ids)}")
    vec = np.array(rows, dtype=float).reshape(n, d)
    if not np.all(np.isfinite(vec)):
        raise EmbeddingFormatError(path, lineno, "non-finite embedding value")
    return cls(tuple(ids), vec)


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray], header: Mapping | None = None) -> None:
    shapes = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    head = json.dumps({"provenance": dict(header or {}), "arrays": shapes}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", CONTAINER_VERSION, len(head)))
        fh.write(head)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint container (bad magic)")
    version, hlen = struct.unpack_from("<HI", blob, 4)
    if version != CONTAINER_VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    off = 4 + struct.calcsize("<HI")
    head = json.loads(blob[off : off + hlen])
    off += hlen
    out: dict[str, np.ndarray] = {}
    for entry in head["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape)
        out[entry["name"]] = arr.astype(float)
        off += 4 * count
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return out, head["provenance"]
