"""Text embedding backends producing unit-norm vectors."""

from __future__ import annotations

import hashlib
import logging
import os
import re
import threading
import time
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import requests

logger = logging.getLogger(__name__)

LOCAL_DEFAULT_DIMS = 256
REMOTE_DEFAULT_DIMS = 1536
NORM_TOLERANCE = 1e-6

_TOKEN = re.compile(r"[^\W_]+")


class EmbeddingError(RuntimeError):
    """A remote embedding call failed; ``retryable`` tells whether to try again."""

    def __init__(self, message: str, status: int | None = None, retryable: bool = True):
        super().__init__(message)
        self.status = status
        self.retryable = retryable


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("embedding must be a non-empty 1-d vector")
        object.__setattr__(self, "values", arr)

    @property
    def dims(self) -> int:
        return int(self.values.shape[0])

    @classmethod
    def normalized(cls, raw) -> "EmbeddingVector":
        arr = np.asarray(raw, dtype=np.float64)
        norm = float(np.linalg.norm(arr))
        if norm == 0.0 or not np.isfinite(norm):
            return cls(unit_basis(arr.shape[0]))
        return cls(arr / norm)

    def tolist(self) -> list[float]:
        return self.values.tolist()

    def __eq__(self, other):
        return isinstance(other, EmbeddingVector) and np.array_equal(self.values, other.values)

    __hash__ = None


def unit_basis(dims: int, axis: int = 0) -> np.ndarray:
    v = np.zeros(dims)
    v[axis] = 1.0
    return v


def cosine(a: EmbeddingVector, b: EmbeddingVector) -> float:
    if a.dims != b.dims:
        raise ValueError(f"dimension mismatch: {a.dims} != {b.dims}")
    return float(min(1.0, max(-1.0, float(np.dot(a.values, b.values)))))


@dataclass
class EmbedderConfig:
    backend: str = "local"  # "local" | "remote"
    dims: int | None = None
    endpoint: str = "https://api.openai.com/v1"
    model: str = "text-embedding-3-small"
    api_key_env: str = "OPENAI_API_KEY"
    retries: int = 2
    backoff: float = 0.5
    timeout: float = 30.0
    max_in_flight: int = 8
    max_chars: int = 16000
    bigrams: bool = True
    memo: bool = True

    def __post_init__(self):
        self.backend = self.backend.lower()
        if self.backend not in ("local", "remote"):
            raise ValueError(f"unknown embedding backend {self.backend!r}")
        if self.dims is None:
            self.dims = LOCAL_DEFAULT_DIMS if self.backend == "local" else REMOTE_DEFAULT_DIMS
        if self.dims < 8:
            raise ValueError("dims must be >= 8")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


class LocalEmbedder:
    """Hashed unigram + adjacent-bigram counts, L2-normalized.

    Bucket of a feature is ``crc32(utf8(feature)) % dims``; a bigram feature is
    the two tokens joined by a single space.
    """

    def __init__(self, dims: int = LOCAL_DEFAULT_DIMS, bigrams: bool = True, max_chars: int = 16000):
        self.dims = dims
        self.bigrams = bigrams
        self.max_chars = max_chars
        self._buckets: dict[str, int] = {}

    def _bucket(self, feature: str) -> int:
        b = self._buckets.get(feature)
        if b is None:
            b = zlib.crc32(feature.encode("utf-8")) % self.dims
            if len(self._buckets) < 500_000:
                self._buckets[feature] = b
        return b

    def counts(self, text: str) -> np.ndarray:
        tokens = tokenize(text[: self.max_chars])
        idx = [self._bucket(t) for t in tokens]
        if self.bigrams:
            idx.extend(self._bucket(f"{a} {b}") for a, b in zip(tokens, tokens[1:]))
        return np.bincount(np.asarray(idx, dtype=np.int64), minlength=self.dims).astype(np.float64)

    def embed(self, text: str) -> EmbeddingVector:
        return EmbeddingVector.normalized(self.counts(text))

    def embed_many(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        return [self.embed(t) for t in texts]


class RemoteEmbedder:
    """Client for an OpenAI-compatible ``/embeddings`` endpoint."""

    def __init__(self, cfg: EmbedderConfig, session: requests.Session | None = None):
        self.cfg = cfg
        self.dims = cfg.dims
        self._session = session or requests.Session()
        self._slots = threading.BoundedSemaphore(cfg.max_in_flight)

    def __repr__(self):
        return f"RemoteEmbedder(endpoint={self.cfg.endpoint!r}, model={self.cfg.model!r}, dims={self.dims})"

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.cfg.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, texts: list[str]) -> list[list[float]]:
        url = self.cfg.endpoint.rstrip("/") + "/embeddings"
        body = {"model": self.cfg.model, "input": [t[: self.cfg.max_chars] for t in texts]}
        try:
            with self._slots:
                resp = self._session.post(url, json=body, headers=self._headers(), timeout=self.cfg.timeout)
        except requests.RequestException as exc:
            raise EmbeddingError(f"transport failure: {type(exc).__name__}") from None
        if not 200 <= resp.status_code < 300:
            raise EmbeddingError(f"embeddings endpoint returned {resp.status_code}", status=resp.status_code)
        try:
            data = resp.json()["data"]
            vectors = [item["embedding"] for item in data]
        except (ValueError, KeyError, TypeError):
            raise EmbeddingError("malformed embeddings response", status=resp.status_code) from None
        if len(vectors) != len(texts) or any(len(v) != self.dims for v in vectors):
            raise EmbeddingError("embeddings response has wrong shape", status=resp.status_code)
        return vectors

    def embed_many(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        texts = list(texts)
        out = [EmbeddingVector(unit_basis(self.dims)) for _ in texts]
        todo = [i for i, t in enumerate(texts) if t.strip()]
        if not todo:
            return out
        delay = self.cfg.backoff
        for attempt in range(self.cfg.retries + 1):
            try:
                raw = self._post([texts[i] for i in todo])
                break
            except EmbeddingError as exc:
                if attempt == self.cfg.retries:
                    raise EmbeddingError(f"{exc} (after {attempt + 1} attempts)", status=exc.status, retryable=False) from None
                logger.warning("embedding attempt %d failed: %s", attempt + 1, exc)
                time.sleep(delay)
                delay *= 2
        for i, vec in zip(todo, raw):
            out[i] = EmbeddingVector.normalized(vec)
        return out

    def embed(self, text: str) -> EmbeddingVector:
        return self.embed_many([text])[0]


class Embedder:
    """Backend wrapper with an optional in-memory memo keyed by text digest."""

    def __init__(self, cfg: EmbedderConfig | None = None, backend=None):
        self.cfg = cfg or EmbedderConfig()
        if backend is None:
            if self.cfg.backend == "local":
                backend = LocalEmbedder(self.cfg.dims, self.cfg.bigrams, self.cfg.max_chars)
            else:
                backend = RemoteEmbedder(self.cfg)
        self.backend = backend
        self.dims = self.cfg.dims
        self._memo: dict[tuple, EmbeddingVector] | None = {} if self.cfg.memo else None
        self._lock = threading.Lock()

    def _key(self, text: str) -> tuple:
        return (self.cfg.backend, self.dims, hashlib.blake2b(text.encode("utf-8"), digest_size=16).digest())

    def embed_many(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        if self._memo is None:
            return self.backend.embed_many(texts)
        keys = [self._key(t) for t in texts]
        found: dict[tuple, EmbeddingVector] = {}
        missing: dict[tuple, str] = {}
        for k, t in zip(keys, texts):
            hit = self._memo.get(k)
            if hit is not None:
                found[k] = hit
            elif k not in missing:
                missing[k] = t
        if missing:
            fresh = dict(zip(missing.keys(), self.backend.embed_many(list(missing.values()))))
            found.update(fresh)
            with self._lock:
                if len(self._memo) > 200_000:
                    self._memo.clear()
                self._memo.update(fresh)
        return [found[k] for k in keys]

    def embed(self, text: str) -> EmbeddingVector:
        return self.embed_many([text])[0]


def embed(text: str, cfg: EmbedderConfig) -> EmbeddingVector:
    """One-shot embedding without memoization."""
    if cfg.backend == "local":
        return LocalEmbedder(cfg.dims, cfg.bigrams, cfg.max_chars).embed(text)
    return RemoteEmbedder(cfg).embed(text)
