"""Frozen query/item relevance space built from hashed TF-IDF term vectors.

Stands in for a pre-trained embedding table: anything exposing
``item_vectors`` and ``query_vectors`` arrays (row 0 zero) can replace it.
"""

from __future__ import annotations

import hashlib
import math
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"QINRIDX\0"
VERSION = 1
_HEADER = struct.Struct("<8sIIII")


@dataclass
class RelevanceIndex:
    dim: int
    item_vectors: np.ndarray  # (n_items + 1, dim) float32, row 0 = padding
    query_vectors: np.ndarray  # (n_queries + 1, dim) float32, row 0 = unknown

    def item(self, i):
        return self.item_vectors[i]

    def query(self, q):
        return self.query_vectors[q]

    def save(self, path):
        path = Path(path)
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, self.dim, len(self.item_vectors), len(self.query_vectors)))
            fh.write(np.ascontiguousarray(self.item_vectors, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(self.query_vectors, dtype="<f4").tobytes())
        return path

    @classmethod
    def load(cls, path):
        raw = Path(path).read_bytes()
        magic, version, dim, n_items, n_queries = _HEADER.unpack_from(raw, 0)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a relevance index file")
        if version != VERSION:
            raise ValueError(f"{path}: unsupported index version {version}")
        off = _HEADER.size
        items = np.frombuffer(raw, dtype="<f4", count=n_items * dim, offset=off).reshape(n_items, dim)
        off += n_items * dim * 4
        queries = np.frombuffer(raw, dtype="<f4", count=n_queries * dim, offset=off).reshape(n_queries, dim)
        return cls(dim, items.astype(np.float32), queries.astype(np.float32))


def _bucket(term: str, dim: int, seed: int):
    h = hashlib.blake2b(f"{seed}:{term}".encode(), digest_size=8).digest()
    v = int.from_bytes(h, "little")
    return v % dim, (1.0 if (v >> 63) & 1 else -1.0)


def _vectorize(terms, idf, dim, seed, default_idf):
    vec = np.zeros(dim, dtype=np.float64)
    for term, tf in Counter(terms).items():
        b, sign = _bucket(term, dim, seed)
        vec[b] += sign * tf * idf.get(term, default_idf)
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


def build_index_from_terms(item_terms, query_terms, dim: int = 256, seed: int = 0) -> RelevanceIndex:
    """``item_terms[0]`` and ``query_terms[0]`` are the reserved rows."""
    if dim < 4:
        raise ValueError(f"relevance dim must be at least 4, got {dim}")
    docs = item_terms[1:]
    df = Counter(t for terms in docs for t in set(terms))
    n = len(docs)
    idf = {t: math.log((1 + n) / (1 + c)) + 1.0 for t, c in df.items()}
    default_idf = math.log(1 + n) + 1.0
    items = np.zeros((len(item_terms), dim), dtype=np.float32)
    for j in range(1, len(item_terms)):
        # an item without terms still needs a unit vector; give it a private one
        terms = item_terms[j] or [f"#item{j}"]
        items[j] = _vectorize(terms, idf, dim, seed, default_idf)
    queries = np.zeros((len(query_terms), dim), dtype=np.float32)
    for j in range(1, len(query_terms)):
        queries[j] = _vectorize(query_terms[j], idf, dim, seed, default_idf)
    return RelevanceIndex(dim, items, queries)


def build_index(dataset, dim: int = 256, seed: int = 0) -> RelevanceIndex:
    return build_index_from_terms(dataset.item_terms, dataset.query_term_lists, dim=dim, seed=seed)


def relevance(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"relevance dim mismatch: {a.shape} vs {b.shape}")
    return float(np.dot(a.astype(np.float64), b.astype(np.float64)))
