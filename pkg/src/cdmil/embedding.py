"""Sentence/instance embedding backends and padded bag assembly."""

from __future__ import annotations

import hashlib
import json
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import BagOverflow, DimensionMismatch, MissingEmbedding, TransportError
from .schema import Bag, DistortionInstance, LabelSchema

INSTANCE_SEPARATOR = ": "
DEFAULT_DIM = 384
SALIENCE_MODES = ("normalized", "raw")

_MAGIC = b"CDEMB001"


def text_digest(text: str) -> bytes:
    return hashlib.sha256(text.encode("utf-8")).digest()


def instance_text(instance: DistortionInstance) -> str:
    """``"<type>: <relevant text>"``, the string that gets embedded per instance."""
    return f"{instance.type_label}{INSTANCE_SEPARATOR}{instance.relevant_text}"


class EmbeddingBackend:
    backend_id = "base"

    def __init__(self, dimension: int = DEFAULT_DIM):
        self.dimension = int(dimension)

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        raise NotImplementedError

    def embed_text(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]

    def _check(self, vectors: np.ndarray) -> np.ndarray:
        if vectors.ndim != 2 or vectors.shape[1] != self.dimension:
            raise DimensionMismatch(
                f"{self.backend_id}: expected vectors of dim {self.dimension}, got shape {vectors.shape}"
            )
        return vectors


class HashEmbeddingBackend(EmbeddingBackend):
    """Deterministic pseudo-random unit vectors seeded by the text digest."""

    backend_id = "test_hash"

    def embed_many(self, texts):
        out = np.empty((len(texts), self.dimension))
        for i, text in enumerate(texts):
            seed = int.from_bytes(text_digest(text)[:8], "little")
            v = np.random.default_rng(seed).standard_normal(self.dimension)
            out[i] = v / np.linalg.norm(v)
        return out


class PrecomputedFileBackend(EmbeddingBackend):
    """Exact lookup by content digest in a file written by :func:`write_precomputed`."""

    backend_id = "precomputed_file"

    def __init__(self, path: str | Path, dimension: int | None = None):
        self.path = Path(path)
        table, dim = read_precomputed(self.path)
        if dimension is not None and int(dimension) != dim:
            raise DimensionMismatch(f"{self.path}: file has dim {dim}, config says {dimension}")
        super().__init__(dim)
        self._table = table

    def embed_many(self, texts):
        rows = []
        for text in texts:
            try:
                rows.append(self._table[text_digest(text)])
            except KeyError:
                raise MissingEmbedding(f"no precomputed embedding for {text[:60]!r}") from None
        return np.asarray(rows, dtype=np.float64).reshape(len(texts), self.dimension)


def write_precomputed(path: str | Path, texts: Sequence[str], vectors) -> None:
    """Binary file: magic, uint32 dim, uint32 count, then (sha256, float32[dim]) records.
    A ``.manifest.jsonl`` with the source texts is written next to it."""
    vectors = np.asarray(vectors, dtype="<f4")
    if vectors.ndim != 2 or len(vectors) != len(texts):
        raise DimensionMismatch("one vector per text required")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", vectors.shape[1], len(texts)))
        for text, vec in zip(texts, vectors):
            fh.write(text_digest(text))
            fh.write(vec.tobytes())
    with open(manifest_path(path), "w", encoding="utf-8") as fh:
        for text in texts:
            fh.write(json.dumps({"digest": text_digest(text).hex(), "text": text}, ensure_ascii=False) + "\n")


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.jsonl")


def read_precomputed(path: str | Path) -> tuple[dict[bytes, np.ndarray], int]:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a precomputed embedding file")
    dim, count = struct.unpack_from("<II", data, 8)
    rec = 32 + 4 * dim
    if len(data) != 16 + rec * count:
        raise ValueError(f"{path}: truncated or oversized ({len(data)} bytes)")
    table = {}
    for k in range(count):
        off = 16 + k * rec
        table[data[off : off + 32]] = np.frombuffer(data, dtype="<f4", count=dim, offset=off + 32).astype(np.float64)
    return table, dim


class HttpEmbeddingBackend(EmbeddingBackend):
    """POST ``{"texts": [...]}`` and read ``{"vectors": [[...], ...]}``; results are memoized."""

    backend_id = "http_service"

    def __init__(
        self,
        url: str,
        dimension: int = DEFAULT_DIM,
        batch_size: int = 64,
        timeout: float = 60.0,
        post: Callable | None = None,
    ):
        super().__init__(dimension)
        self.url = url
        self.batch_size = batch_size
        self.timeout = timeout
        self._post = post
        self._memo: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def _request(self, texts):
        if self._post is not None:
            return self._post(self.url, {"texts": list(texts)})
        import requests

        try:
            resp = requests.post(self.url, json={"texts": list(texts)}, timeout=self.timeout)
        except requests.RequestException as exc:
            raise TransportError(None, str(exc)) from exc
        if resp.status_code != 200:
            raise TransportError(resp.status_code, resp.text[:200])
        return resp.json()

    def embed_many(self, texts):
        with self._lock:
            todo = [t for t in dict.fromkeys(texts) if t not in self._memo]
        for start in range(0, len(todo), self.batch_size):
            chunk = todo[start : start + self.batch_size]
            body = self._request(chunk)
            vecs = self._check(np.asarray(body["vectors"], dtype=np.float64).reshape(len(chunk), -1))
            with self._lock:
                for t, v in zip(chunk, vecs):
                    self._memo[t] = v
        with self._lock:
            return np.stack([self._memo[t] for t in texts]) if texts else np.zeros((0, self.dimension))


def make_backend(spec: dict) -> EmbeddingBackend:
    kind = spec.get("backend", "test_hash")
    dim = spec.get("dimension", DEFAULT_DIM)
    if kind == "test_hash":
        return HashEmbeddingBackend(dim)
    if kind == "precomputed_file":
        return PrecomputedFileBackend(spec["path"], spec.get("dimension"))
    if kind == "http_service":
        return HttpEmbeddingBackend(spec["url"], dim, spec.get("batch_size", 64), spec.get("timeout", 60.0))
    raise ValueError(f"unknown embedding backend {kind!r}")


def embed_text(backend: EmbeddingBackend, text: str) -> np.ndarray:
    if not text:
        raise ValueError("cannot embed empty text")
    return backend.embed_text(text)


@dataclass
class EmbeddedBag:
    utterance_id: str
    z: np.ndarray  # (d_e,)
    X: np.ndarray  # (N_max, d_e), zero rows past the real instances
    mask: np.ndarray  # (N_max,)
    p: np.ndarray  # (N_max,)
    y: np.ndarray  # (C,) one-hot, loss only


def _weights(bag: Bag, n: int, n_max: int, use_salience: bool, salience_mode: str) -> np.ndarray:
    p = np.zeros(n_max)
    if not use_salience:
        p[:n] = 1.0 / n
    elif salience_mode == "raw":
        p[:n] = [inst.salience_raw for inst in bag.instances]
    else:
        p[:n] = bag.normalized_salience
    return p


def assemble(
    bag: Bag,
    backend: EmbeddingBackend,
    n_max: int,
    use_salience: bool = True,
    schema: LabelSchema | None = None,
    sentence: str | None = None,
    salience_mode: str = "normalized",
) -> EmbeddedBag:
    """Numeric form of one bag: sentence vector, padded instance matrix, mask,
    weights and one-hot target.  Without salience the weights are uniform over
    the real instances."""
    n = len(bag)
    if n > n_max:
        raise BagOverflow(f"bag {bag.utterance_ref!r} has {n} instances > N_max={n_max}")
    if salience_mode not in SALIENCE_MODES:
        raise ValueError(f"salience_mode must be one of {SALIENCE_MODES}")
    text = sentence if sentence is not None else bag.text
    if not text:
        raise ValueError(f"bag {bag.utterance_ref!r}: sentence text needed for z")
    vecs = backend.embed_many([text] + [instance_text(i) for i in bag.instances])
    d = backend.dimension
    X = np.zeros((n_max, d))
    X[:n] = vecs[1:]
    mask = np.zeros(n_max)
    mask[:n] = 1.0
    if schema is not None:
        y = np.zeros(schema.num_classes)
        y[schema.index(bag.target)] = 1.0
    else:
        y = np.zeros(0)
    return EmbeddedBag(bag.utterance_ref, vecs[0].copy(), X, mask, _weights(bag, n, n_max, use_salience, salience_mode), y)


@dataclass
class BagBatch:
    """Stacked :class:`EmbeddedBag` arrays; the ``X`` accepted by the estimator."""

    z: np.ndarray  # (B, d_e)
    X: np.ndarray  # (B, N, d_e)
    mask: np.ndarray  # (B, N)
    p: np.ndarray  # (B, N)
    ids: tuple = ()

    def __len__(self):
        return self.z.shape[0]

    def __getitem__(self, idx):
        idx = np.asarray(idx) if not isinstance(idx, slice) else idx
        ids = tuple(np.asarray(self.ids, dtype=object)[idx]) if self.ids else ()
        return BagBatch(self.z[idx], self.X[idx], self.mask[idx], self.p[idx], ids)

    @property
    def shape(self):
        # lets sklearn's length checks treat a batch like an (n_samples, ...) array
        return (len(self),) + self.X.shape[1:]

    @classmethod
    def from_bags(cls, bags: Sequence[EmbeddedBag]) -> "BagBatch":
        return cls(
            np.stack([b.z for b in bags]),
            np.stack([b.X for b in bags]),
            np.stack([b.mask for b in bags]),
            np.stack([b.p for b in bags]),
            tuple(b.utterance_id for b in bags),
        )

    def save(self, path, y=None):
        arrays = dict(z=self.z, X=self.X, mask=self.mask, p=self.p, ids=np.asarray(self.ids, dtype=str))
        if y is not None:
            arrays["y"] = np.asarray(y)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as data:
            batch = cls(data["z"], data["X"], data["mask"], data["p"], tuple(str(i) for i in data["ids"]))
            y = data["y"] if "y" in data.files else None
        return batch, y


def corpus_n_max(bags: Iterable[Bag]) -> int:
    return max(len(b) for b in bags)


class BagEmbedder(TransformerMixin, BaseEstimator):
    """Turn :class:`Bag` objects into a :class:`BagBatch`.

    ``fit`` records the padding width (the largest bag seen, unless
    ``n_max`` is fixed).  The backend is a constructor parameter so the
    embedder can sit in a ``Pipeline`` in front of the classifier.
    """

    def __init__(self, backend=None, n_max=None, use_salience=True, salience_mode="normalized"):
        self.backend = backend
        self.n_max = n_max
        self.use_salience = use_salience
        self.salience_mode = salience_mode

    def fit(self, bags, y=None):
        bags = list(bags)
        if not bags:
            raise ValueError("BagEmbedder.fit needs at least one bag")
        self.n_max_ = int(self.n_max) if self.n_max is not None else corpus_n_max(bags)
        self.backend_ = self.backend if self.backend is not None else HashEmbeddingBackend()
        return self

    def transform(self, bags):
        if not hasattr(self, "n_max_"):
            from sklearn.exceptions import NotFittedError

            raise NotFittedError("BagEmbedder is not fitted yet")
        embedded = [
            assemble(b, self.backend_, self.n_max_, self.use_salience, salience_mode=self.salience_mode)
            for b in bags
        ]
        return BagBatch.from_bags(embedded)
