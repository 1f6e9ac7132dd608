"""Dense embeddings and an exact cosine-similarity index persisted as JSONL."""

from __future__ import annotations

import enum
import hashlib
import json
import os
import re
import threading
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable

import httpx
import numpy as np

from ._http import post_json
from .clock import timestamp
from .errors import AuthError, DimensionMismatch, DuplicateDocId, IndexNotFound, MalformedResponse
from .llm_backend import API_KEY_ENV

INDEX_FILE = "index.jsonl"
META_FILE = "index.meta.json"
DEFAULT_DIM = 64
DEFAULT_K = 4

_WORD = re.compile(r"\w+")


class Method(str, enum.Enum):
    BASELINE = "Baseline"
    IMPLICIT = "Implicit"


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity; 0.0 when either vector is zero."""
    nu, nv = float(np.linalg.norm(u)), float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


class EmbedBackend:
    backend_id = "abstract"
    dim: int | None = None

    def embed(self, text: str) -> np.ndarray:
        raise NotImplementedError

    def embed_many(self, texts: list[str]) -> list[np.ndarray]:
        return [self.embed(t) for t in texts]

    def config(self) -> dict:
        raise NotImplementedError


class HashEmbedder(EmbedBackend):
    """Seeded bag-of-words random projection.

    Each lower-cased word maps to a fixed pseudo-random Gaussian vector; a
    text embeds to the sum over its words. Empty text gives the zero vector.
    """

    def __init__(self, dim: int = DEFAULT_DIM, seed: int = 0):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.seed = seed
        self.backend_id = f"hash:d{dim}:s{seed}"
        self._word_vector = lru_cache(maxsize=65536)(self._make_word_vector)

    def _make_word_vector(self, word: str) -> np.ndarray:
        digest = hashlib.blake2b(f"{self.seed}\0{word}".encode("utf-8"), digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        vec = rng.standard_normal(self.dim)
        vec.flags.writeable = False
        return vec

    def embed(self, text: str) -> np.ndarray:
        out = np.zeros(self.dim)
        for word in _WORD.findall(text.lower()):
            out += self._word_vector(word)
        return out

    def config(self) -> dict:
        return {"backend": "hash", "dim": self.dim, "seed": self.seed}


class RemoteEmbedder(EmbedBackend):
    """Client for an OpenAI-compatible ``/embeddings`` endpoint.

    The dimension is learnt from the first response and enforced after.
    """

    def __init__(self, endpoint_url: str, model_name: str, *, api_key: str | None = None,
                 api_key_env: str = API_KEY_ENV, dim: int | None = None, max_retries: int = 3,
                 backoff_base: float = 0.5, timeout: float = 60.0, client: httpx.Client | None = None):
        self.endpoint_url = endpoint_url
        self.model_name = model_name
        self.dim = dim
        self._api_key = api_key if api_key is not None else os.environ.get(api_key_env)
        self._api_key_env = api_key_env
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self._client = client or httpx.Client(timeout=timeout)
        self._lock = threading.Lock()
        self.backend_id = f"remote:{model_name}"

    def __repr__(self):
        return f"RemoteEmbedder(endpoint_url={self.endpoint_url!r}, model_name={self.model_name!r})"

    def embed_many(self, texts: list[str]) -> list[np.ndarray]:
        if not texts:
            return []
        if not self._api_key:
            raise AuthError(f"credential missing: set {self._api_key_env}")
        body = post_json(self._client, self.endpoint_url, {"model": self.model_name, "input": texts},
                         self._api_key, max_retries=self.max_retries, backoff_base=self.backoff_base)
        try:
            rows = sorted(body["data"], key=lambda r: r.get("index", 0))
            vectors = [np.asarray(r["embedding"], dtype=float) for r in rows]
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedResponse(f"unexpected embeddings payload: {exc!r}") from exc
        if len(vectors) != len(texts):
            raise MalformedResponse(f"asked for {len(texts)} embeddings, got {len(vectors)}")
        with self._lock:
            for vec in vectors:
                if vec.ndim != 1 or not np.all(np.isfinite(vec)):
                    raise MalformedResponse("embedding is not a finite vector")
                if self.dim is None:
                    self.dim = len(vec)
                elif len(vec) != self.dim:
                    raise DimensionMismatch(f"expected dim {self.dim}, got {len(vec)}")
        return vectors

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]

    def config(self) -> dict:
        return {"backend": "remote", "endpoint_url": self.endpoint_url, "model_name": self.model_name, "dim": self.dim}


def backend_from_config(config: dict, **remote_kw) -> EmbedBackend:
    if config["backend"] == "hash":
        return HashEmbedder(dim=config["dim"], seed=config.get("seed", 0))
    return RemoteEmbedder(config["endpoint_url"], config["model_name"], dim=config.get("dim"), **remote_kw)


@dataclass(frozen=True)
class IndexedDoc:
    doc_id: str
    text: str
    embedding: np.ndarray
    metadata: dict = field(default_factory=dict)


class VectorIndex:
    """Exact linear-scan cosine index; docs are kept sorted by ``doc_id``."""

    def __init__(self, docs: Iterable[IndexedDoc], dim: int, embed_config: dict, method: Method | None = None,
                 created: str | None = None, embed_backend_id: str = ""):
        self.docs = sorted(docs, key=lambda d: d.doc_id)
        self.dim = dim
        self.embed_config = dict(embed_config)
        self.method = method
        self.created = created or timestamp()
        self.embed_backend_id = embed_backend_id
        seen = set()
        for d in self.docs:
            if d.doc_id in seen:
                raise DuplicateDocId(d.doc_id)
            seen.add(d.doc_id)
            if d.embedding.shape != (dim,):
                raise DimensionMismatch(f"{d.doc_id}: embedding shape {d.embedding.shape}, index dim {dim}")
        matrix = np.array([d.embedding for d in self.docs], dtype=float).reshape(len(self.docs), dim)
        norms = np.linalg.norm(matrix, axis=1)
        self._unit = np.divide(matrix, norms[:, None], out=np.zeros_like(matrix), where=norms[:, None] > 0)

    def __len__(self) -> int:
        return len(self.docs)

    def search(self, query_vec: np.ndarray, k: int) -> list[tuple[IndexedDoc, float]]:
        if k < 1:
            raise ValueError("k must be >= 1")
        if not self.docs:
            return []
        qn = float(np.linalg.norm(query_vec))
        if qn == 0.0:
            scores = np.zeros(len(self.docs))
        else:
            scores = np.clip(self._unit @ (np.asarray(query_vec, dtype=float) / qn), -1.0, 1.0)
        # docs are sorted by id, so a stable sort on -score breaks ties by id
        order = np.argsort(-scores, kind="stable")[:k]
        return [(self.docs[i], float(scores[i])) for i in order]

    def save(self, directory: str | os.PathLike) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / INDEX_FILE, "w", encoding="utf-8") as fh:
            for d in self.docs:
                row = {"doc_id": d.doc_id, "text": d.text, "embedding": d.embedding.tolist(), "metadata": d.metadata}
                fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")
        meta = {
            "dim": self.dim,
            "embed_backend": self.embed_config,
            "embed_backend_id": self.embed_backend_id,
            "method": self.method.value if self.method else None,
            "created": self.created,
            "count": len(self.docs),
        }
        (directory / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "VectorIndex":
        directory = Path(directory)
        if directory.is_file():
            directory = directory.parent
        if not (directory / INDEX_FILE).is_file() or not (directory / META_FILE).is_file():
            raise IndexNotFound(f"no index at {directory}")
        meta = json.loads((directory / META_FILE).read_text(encoding="utf-8"))
        docs = []
        with open(directory / INDEX_FILE, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    row = json.loads(line)
                    docs.append(IndexedDoc(row["doc_id"], row["text"], np.asarray(row["embedding"], dtype=float),
                                           row["metadata"]))
        method = Method(meta["method"]) if meta.get("method") else None
        return cls(docs, meta["dim"], meta["embed_backend"], method, meta.get("created"), meta.get("embed_backend_id", ""))


def embed(backend: EmbedBackend, text: str) -> np.ndarray:
    return backend.embed(text)


def build_index(docs: Iterable[tuple[str, str, dict]], backend: EmbedBackend,
                method: Method | None = None, *, batch_size: int = 64) -> VectorIndex:
    docs = list(docs)
    seen = set()
    for doc_id, _, _ in docs:
        if doc_id in seen:
            raise DuplicateDocId(doc_id)
        seen.add(doc_id)
    indexed = []
    for start in range(0, len(docs), batch_size):
        batch = docs[start:start + batch_size]
        vectors = backend.embed_many([text for _, text, _ in batch])
        for (doc_id, text, metadata), vec in zip(batch, vectors):
            meta = dict(metadata)
            if method is not None:
                meta["method"] = method.value
            indexed.append(IndexedDoc(doc_id, text, vec, meta))
    dim = backend.dim if backend.dim is not None else DEFAULT_DIM
    return VectorIndex(indexed, dim, backend.config(), method, embed_backend_id=backend.backend_id)


def retrieve(index: VectorIndex, query: str, k: int, backend: EmbedBackend) -> list[tuple[IndexedDoc, float]]:
    """Top ``min(k, len(index))`` docs by descending cosine, ties by ``doc_id``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not len(index):
        return []
    return index.search(backend.embed(query), k)
