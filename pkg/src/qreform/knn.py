"""Exact K-nearest-neighbor index over behavior-rich query embeddings.

Brute-force cosine scan: at desk scale exactness is cheap and makes every
downstream metric deterministic.  Entries are stored sorted by query_id,
so a stable sort on descending similarity breaks ties by ascending id.
Any accelerated backend added later must match this module on the same
oracle tests.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .files import FileFormatError

_UNIT_TOL = 1e-6
_INDEX_VERSION = 1


class KnnIndex:
    """Immutable (query_id, unit embedding) table answering exact top-k."""

    def __init__(
        self,
        query_ids: Sequence[str],
        embeddings: np.ndarray,
        model_checksum: str | None = None,
    ) -> None:
        embeddings = np.asarray(embeddings, dtype=np.float64)
        if embeddings.ndim != 2 or len(query_ids) != embeddings.shape[0]:
            raise ValueError("need one embedding row per query id")
        if len(query_ids) == 0:
            raise ValueError("cannot build an empty index: no rich queries")
        if len(set(query_ids)) != len(query_ids):
            raise ValueError("query ids must be unique")
        norms = np.linalg.norm(embeddings, axis=1)
        if np.any(np.abs(norms - 1.0) > _UNIT_TOL):
            worst = int(np.argmax(np.abs(norms - 1.0)))
            raise ValueError(
                f"embedding for {query_ids[worst]!r} has norm {norms[worst]!r}, not 1"
            )
        order = sorted(range(len(query_ids)), key=lambda i: query_ids[i])
        self.query_ids: tuple[str, ...] = tuple(query_ids[i] for i in order)
        self.embeddings = embeddings[order]
        self.model_checksum = model_checksum

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def __len__(self) -> int:
        return len(self.query_ids)

    def knn(self, probe: np.ndarray, k: int) -> list[tuple[str, float]]:
        """Exact top-k by dot product, ties broken by ascending query_id."""
        return self.knn_many(np.asarray(probe)[None, :], k)[0]

    def knn_many(
        self, probes: np.ndarray, k: int
    ) -> list[list[tuple[str, float]]]:
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        probes = np.asarray(probes, dtype=np.float64)
        if probes.ndim != 2 or probes.shape[1] != self.dim:
            raise ValueError(
                f"probe dimension {probes.shape[-1]} does not match index dim {self.dim}"
            )
        sims = probes @ self.embeddings.T
        results = []
        for row in sims:
            # Entries are id-sorted, so a stable sort on -sim settles ties.
            order = np.argsort(-row, kind="stable")[:k]
            results.append([(self.query_ids[i], float(row[i])) for i in order])
        return results


def build_index(model, queries: Mapping[str, str] | Sequence[str]) -> KnnIndex:
    """Embed the candidate pool (query_id -> raw text) into an index."""
    if isinstance(queries, Mapping):
        ids = sorted(queries)
        texts = [queries[i] for i in ids]
    else:
        ids = sorted(queries)
        texts = list(ids)
    if not ids:
        raise ValueError("cannot build an empty index: no rich queries")
    from .encoders import params_checksum

    embeddings = model.embed_many(texts)
    return KnnIndex(ids, embeddings, model_checksum=params_checksum(model))


def save_index(index: KnnIndex, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": _INDEX_VERSION,
        "dim": index.dim,
        "count": len(index),
        "model_checksum": index.model_checksum,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        np.savez(
            fh,
            meta=np.frombuffer(meta_bytes, dtype=np.uint8),
            query_ids=np.array(index.query_ids),
            embeddings=index.embeddings,
        )


def load_index(path, expected_model_checksum: str | None = None) -> KnnIndex:
    """Load an index; rejects version, shape, or model-provenance mismatches."""
    path = Path(path)
    with np.load(path) as bundle:
        if "meta" not in bundle:
            raise FileFormatError(f"{path}: not an index file (no meta)")
        meta = json.loads(bundle["meta"].tobytes().decode("utf-8"))
        ids = [str(q) for q in bundle["query_ids"]]
        embeddings = np.asarray(bundle["embeddings"], dtype=np.float64)
    if meta.get("version") != _INDEX_VERSION:
        raise FileFormatError(f"{path}: unsupported index version {meta.get('version')!r}")
    if embeddings.shape != (meta["count"], meta["dim"]):
        raise FileFormatError(
            f"{path}: embedding block {embeddings.shape} does not match header "
            f"({meta['count']}, {meta['dim']})"
        )
    checksum = meta.get("model_checksum")
    if expected_model_checksum is not None and checksum != expected_model_checksum:
        raise FileFormatError(
            f"{path}: index was built from model {checksum!r}, expected "
            f"{expected_model_checksum!r}"
        )
    return KnnIndex(ids, embeddings, model_checksum=checksum)
