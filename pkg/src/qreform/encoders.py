"""Desk-scale encoder pair: hashed n-gram bi- and cross-encoders.

Texts become bags of boundary-marked character n-grams hashed into a
fixed bucket space.  The bi-encoder projects that bag linearly and
L2-normalizes, so cosine similarity is a plain dot product.  The
cross-encoder scores an ordered pair through a small MLP over four
feature blocks (source bag, target bag, elementwise min, positive part
of source minus target), which makes it position-aware by construction.
Both models expose closed-form backward passes; the training module only
ever sees parameter dicts and same-shaped gradient dicts.  The encoders
operate on raw text, not normalized text, so they must learn surface
invariance instead of inheriting it.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import sparse

from .files import FileFormatError, sha256_bytes

DEFAULT_NGRAM_SIZES = (2, 3, 4)
_BOUNDARY_OPEN = "^"
_BOUNDARY_CLOSE = "$"
_NORM_FLOOR = 1e-12


def _hash_bucket(ngram: str, feature_dim: int) -> int:
    digest = hashlib.blake2b(ngram.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % feature_dim


def featurize(
    text: str,
    ngram_sizes: Iterable[int] = DEFAULT_NGRAM_SIZES,
    feature_dim: int = 1 << 14,
) -> dict[int, float]:
    """Hashed character n-gram counts with "^"/"$" boundary markers."""
    if not text:
        raise ValueError("cannot featurize empty text")
    padded = _BOUNDARY_OPEN + text + _BOUNDARY_CLOSE
    buckets: dict[int, float] = {}
    for size in ngram_sizes:
        for i in range(len(padded) - size + 1):
            bucket = _hash_bucket(padded[i:i + size], feature_dim)
            buckets[bucket] = buckets.get(bucket, 0.0) + 1.0
    return buckets


class Featurizer:
    """Caches each text's sparse feature row; rows stack into CSR batches."""

    def __init__(
        self, feature_dim: int, ngram_sizes: Iterable[int] = DEFAULT_NGRAM_SIZES
    ) -> None:
        if feature_dim < 1:
            raise ValueError(f"feature_dim must be >= 1, got {feature_dim}")
        self.feature_dim = int(feature_dim)
        self.ngram_sizes = tuple(int(n) for n in ngram_sizes)
        self._cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def row(self, text: str) -> tuple[np.ndarray, np.ndarray]:
        """Sorted bucket indices and counts for one text."""
        cached = self._cache.get(text)
        if cached is None:
            buckets = featurize(text, self.ngram_sizes, self.feature_dim)
            indices = np.array(sorted(buckets), dtype=np.int32)
            values = np.array([buckets[i] for i in indices], dtype=np.float64)
            cached = (indices, values)
            self._cache[text] = cached
        return cached

    def matrix(self, texts: Sequence[str]) -> sparse.csr_matrix:
        indptr = np.zeros(len(texts) + 1, dtype=np.int64)
        index_parts = []
        value_parts = []
        for i, text in enumerate(texts):
            indices, values = self.row(text)
            index_parts.append(indices)
            value_parts.append(values)
            indptr[i + 1] = indptr[i] + len(indices)
        data = np.concatenate(value_parts) if value_parts else np.zeros(0)
        cols = np.concatenate(index_parts) if index_parts else np.zeros(0, dtype=np.int32)
        return sparse.csr_matrix(
            (data, cols, indptr), shape=(len(texts), self.feature_dim)
        )


def _uniform_init(rng: np.random.Generator, fan_in: int, shape: tuple) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class BiEncoderModel:
    """Linear projection of hashed n-grams onto the unit sphere."""

    kind = "bi-encoder"

    def __init__(
        self,
        projection: np.ndarray,
        ngram_sizes: Sequence[int] = DEFAULT_NGRAM_SIZES,
        seed: int = 0,
    ) -> None:
        self.projection = np.asarray(projection, dtype=np.float64)
        if self.projection.ndim != 2:
            raise ValueError("projection must be a 2-d matrix")
        self.ngram_sizes = tuple(ngram_sizes)
        self.seed = int(seed)
        self.featurizer = Featurizer(self.projection.shape[0], self.ngram_sizes)

    @classmethod
    def initialize(
        cls,
        feature_dim: int,
        embed_dim: int,
        ngram_sizes: Sequence[int] = DEFAULT_NGRAM_SIZES,
        seed: int = 0,
    ) -> "BiEncoderModel":
        rng = np.random.default_rng(seed)
        projection = _uniform_init(rng, feature_dim, (feature_dim, embed_dim))
        return cls(projection, ngram_sizes, seed)

    @property
    def feature_dim(self) -> int:
        return self.projection.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.projection.shape[1]

    def parameters(self) -> dict[str, np.ndarray]:
        return {"projection": self.projection}

    def set_parameters(self, params: Mapping[str, np.ndarray]) -> None:
        self.projection = np.asarray(params["projection"], dtype=np.float64)

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        units, _ = self.embed_many_with_backward(texts)
        return units

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]

    def embed_many_with_backward(
        self, texts: Sequence[str]
    ) -> tuple[np.ndarray, Callable[[np.ndarray], dict[str, np.ndarray]]]:
        """Unit embeddings plus a closure mapping dL/dunits to dL/dparams."""
        features = self.featurizer.matrix(texts)
        raw = features @ self.projection
        norms = np.linalg.norm(raw, axis=1)
        degenerate = np.flatnonzero(norms < _NORM_FLOOR)
        if degenerate.size:
            raise ValueError(
                f"text {texts[degenerate[0]]!r} projects to a zero vector"
            )
        units = raw / norms[:, None]

        def backward(grad_units: np.ndarray) -> dict[str, np.ndarray]:
            # Through row normalization: g_raw = (g - (g.u)u) / ||raw||.
            inner = np.sum(grad_units * units, axis=1, keepdims=True)
            grad_raw = (grad_units - inner * units) / norms[:, None]
            return {"projection": features.T @ grad_raw}

        return units, backward

    def similarity(self, text_a: str, text_b: str) -> float:
        units = self.embed_many([text_a, text_b])
        return float(units[0] @ units[1])


class CrossEncoderModel:
    """Position-aware MLP scorer over joint pair features.

    The joint row concatenates four blocks in the hashed bucket space:
    source counts, target counts, elementwise min, and the positive part
    of source minus target.  Swapping the pair permutes the first two
    blocks and changes the fourth, so scores are direction-sensitive.
    """

    kind = "cross-encoder"
    N_BLOCKS = 4

    def __init__(
        self,
        weights: Sequence[np.ndarray],
        biases: Sequence[np.ndarray],
        feature_dim: int,
        ngram_sizes: Sequence[int] = DEFAULT_NGRAM_SIZES,
        seed: int = 0,
    ) -> None:
        if len(weights) != len(biases):
            raise ValueError("weights and biases must pair up")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        if self.weights[0].shape[0] != self.N_BLOCKS * feature_dim:
            raise ValueError(
                f"first layer expects {self.N_BLOCKS}*feature_dim="
                f"{self.N_BLOCKS * feature_dim} inputs, got {self.weights[0].shape[0]}"
            )
        if self.weights[-1].shape[1] != 1:
            raise ValueError("final layer must produce a scalar score")
        self.feature_dim = int(feature_dim)
        self.ngram_sizes = tuple(ngram_sizes)
        self.seed = int(seed)
        self.featurizer = Featurizer(self.feature_dim, self.ngram_sizes)

    @classmethod
    def initialize(
        cls,
        feature_dim: int,
        hidden_dims: Sequence[int] = (64, 16),
        ngram_sizes: Sequence[int] = DEFAULT_NGRAM_SIZES,
        seed: int = 0,
    ) -> "CrossEncoderModel":
        rng = np.random.default_rng(seed)
        dims = [cls.N_BLOCKS * feature_dim, *hidden_dims, 1]
        weights = []
        biases = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            weights.append(_uniform_init(rng, fan_in, (fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, feature_dim, ngram_sizes, seed)

    @property
    def hidden_dims(self) -> tuple[int, ...]:
        return tuple(w.shape[1] for w in self.weights[:-1])

    def parameters(self) -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"w{i}"] = w
            params[f"b{i}"] = b
        return params

    def set_parameters(self, params: Mapping[str, np.ndarray]) -> None:
        for i in range(len(self.weights)):
            self.weights[i] = np.asarray(params[f"w{i}"], dtype=np.float64)
            self.biases[i] = np.asarray(params[f"b{i}"], dtype=np.float64)

    def joint_matrix(self, pairs: Sequence[tuple[str, str]]) -> sparse.csr_matrix:
        for source, target in pairs:
            if not source or not target:
                raise ValueError("cannot score a pair with empty text")
        sources = self.featurizer.matrix([p[0] for p in pairs])
        targets = self.featurizer.matrix([p[1] for p in pairs])
        both = sources.minimum(targets)
        surplus = (sources - targets).maximum(0)
        joint = sparse.hstack([sources, targets, both, surplus], format="csr")
        return joint

    def score_many(self, pairs: Sequence[tuple[str, str]]) -> np.ndarray:
        scores, _ = self.score_many_with_backward(pairs)
        return scores

    def score_pair(self, source_text: str, target_text: str) -> float:
        return float(self.score_many([(source_text, target_text)])[0])

    def score_many_with_backward(
        self, pairs: Sequence[tuple[str, str]]
    ) -> tuple[np.ndarray, Callable[[np.ndarray], dict[str, np.ndarray]]]:
        """Scores plus a closure mapping dL/dscores to dL/dparams."""
        joint = self.joint_matrix(pairs)
        activations: list = [joint]
        value = joint
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            value = value @ w + b
            if layer < len(self.weights) - 1:
                value = np.tanh(value)
            activations.append(value)
        scores = np.asarray(activations[-1]).reshape(-1)
        if not np.all(np.isfinite(scores)):
            raise FloatingPointError("cross-encoder produced a non-finite score")

        def backward(grad_scores: np.ndarray) -> dict[str, np.ndarray]:
            grads: dict[str, np.ndarray] = {}
            delta = np.asarray(grad_scores, dtype=np.float64).reshape(-1, 1)
            for layer in range(len(self.weights) - 1, -1, -1):
                inputs = activations[layer]
                grads[f"w{layer}"] = inputs.T @ delta
                grads[f"b{layer}"] = delta.sum(axis=0)
                if layer > 0:
                    delta = delta @ self.weights[layer].T
                    delta = delta * (1.0 - activations[layer] ** 2)
            return grads

        return scores, backward


_CHECKPOINT_VERSION = 1


def _model_meta(model) -> dict:
    meta = {
        "kind": model.kind,
        "version": _CHECKPOINT_VERSION,
        "ngram_sizes": list(model.ngram_sizes),
        "seed": model.seed,
    }
    if isinstance(model, BiEncoderModel):
        meta["feature_dim"] = model.feature_dim
        meta["embed_dim"] = model.embed_dim
    else:
        meta["feature_dim"] = model.feature_dim
        meta["hidden_dims"] = list(model.hidden_dims)
    return meta


def params_checksum(model) -> str:
    """Stable digest of architecture plus parameters, for provenance tags."""
    digest = hashlib.sha256()
    digest.update(json.dumps(_model_meta(model), sort_keys=True).encode("utf-8"))
    for name in sorted(model.parameters()):
        array = np.ascontiguousarray(model.parameters()[name], dtype=np.float64)
        digest.update(name.encode("utf-8"))
        digest.update(array.tobytes())
    return digest.hexdigest()


def save_checkpoint(model, path) -> str:
    """Write a versioned .npz checkpoint; returns the parameter checksum."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta_bytes = json.dumps(_model_meta(model), sort_keys=True).encode("utf-8")
    arrays = {f"param_{k}": v for k, v in model.parameters().items()}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.frombuffer(meta_bytes, dtype=np.uint8), **arrays)
    return params_checksum(model)


def load_checkpoint(path):
    """Load either encoder kind; rejects version or dimension mismatches."""
    path = Path(path)
    with np.load(path) as bundle:
        if "meta" not in bundle:
            raise FileFormatError(f"{path}: not an encoder checkpoint (no meta)")
        meta = json.loads(bytes(bundle["meta"].tobytes()).decode("utf-8"))
        params = {
            name[len("param_"):]: bundle[name]
            for name in bundle.files
            if name.startswith("param_")
        }
    if meta.get("version") != _CHECKPOINT_VERSION:
        raise FileFormatError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
    kind = meta.get("kind")
    if kind == BiEncoderModel.kind:
        projection = params.get("projection")
        if projection is None or projection.ndim != 2:
            raise FileFormatError(f"{path}: missing or malformed projection matrix")
        if list(projection.shape) != [meta["feature_dim"], meta["embed_dim"]]:
            raise FileFormatError(
                f"{path}: projection shape {projection.shape} does not match "
                f"header dims ({meta['feature_dim']}, {meta['embed_dim']})"
            )
        return BiEncoderModel(projection, meta["ngram_sizes"], meta["seed"])
    if kind == CrossEncoderModel.kind:
        n_layers = len(meta["hidden_dims"]) + 1
        try:
            weights = [params[f"w{i}"] for i in range(n_layers)]
            biases = [params[f"b{i}"] for i in range(n_layers)]
        except KeyError as missing:
            raise FileFormatError(f"{path}: missing parameter {missing}") from None
        expected = [
            CrossEncoderModel.N_BLOCKS * meta["feature_dim"],
            *meta["hidden_dims"],
            1,
        ]
        for i, w in enumerate(weights):
            if list(w.shape) != [expected[i], expected[i + 1]]:
                raise FileFormatError(
                    f"{path}: layer {i} shape {w.shape} does not match header "
                    f"dims ({expected[i]}, {expected[i + 1]})"
                )
        return CrossEncoderModel(
            weights, biases, meta["feature_dim"], meta["ngram_sizes"], meta["seed"]
        )
    raise FileFormatError(f"{path}: unknown checkpoint kind {kind!r}")
