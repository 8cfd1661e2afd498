"""Labeled crawl-result store with threshold filtering and MMR selection."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .embedding import Embedder, EmbeddingVector
from .records import (
    PROMPT_VIEW_CAP,
    SEARCH_CATEGORIES,
    Category,
    CrawlRecord,
    JsonLinesReader,
    Label,
    canonical_text,
    persist,
    prompt_view,
    write_jsonl,
)
from . import records as records_mod

logger = logging.getLogger(__name__)

# Scores are compared at this many decimals so that mathematically equal
# similarities tie exactly regardless of summation order.
SCORE_DECIMALS = 12

ALL_CATEGORIES = (Category.DOMAIN, Category.NETWORK, Category.HTML, Category.FULL)
_LABEL_CODE = {Label.SUCCESS: 1, Label.FAILED: 2}


class DuplicateRecordError(ValueError):
    pass


class StoreFileError(ValueError):
    pass


def quantize(x):
    return np.round(x, SCORE_DECIMALS)


@dataclass
class RetrievalParams:
    threshold: float = 0.65
    lam: float = 0.7
    per_label_k: int = 5

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must be in [0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must be in [0, 1]")
        if self.per_label_k < 0:
            raise ValueError("per_label_k must be >= 0")


@dataclass
class StoredEntry:
    record_id: int
    label: Label
    vectors: dict[Category, EmbeddingVector]
    prompt_view: str = ""

    def __post_init__(self):
        self.label = Label(self.label)
        if self.label is Label.UNLABELED:
            raise ValueError("stored entries must be labeled")
        self.vectors = {Category(k): v for k, v in self.vectors.items()}
        if set(self.vectors) != set(ALL_CATEGORIES):
            raise ValueError("entry needs Domain, Network, Html and Full vectors")
        if len({v.dims for v in self.vectors.values()}) != 1:
            raise ValueError("entry vectors differ in dims")

    @property
    def dims(self) -> int:
        return self.vectors[Category.FULL].dims

    def to_dict(self):
        return {
            "record_id": self.record_id,
            "label": self.label.value,
            "dims": self.dims,
            "vectors": {c.value: self.vectors[c].tolist() for c in ALL_CATEGORIES},
        }


@dataclass
class RetrievedExamples:
    successes: list[str] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)
    success_ids: list[int] = field(default_factory=list)
    failure_ids: list[int] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not self.successes and not self.failures


def _pick(values: np.ndarray, ids: np.ndarray, mask: np.ndarray) -> int:
    """Index of the max value among ``mask``; ties go to the lower id."""
    vals = np.where(mask, values, -np.inf)
    best = vals.max()
    tied = np.nonzero(mask & (vals == best))[0]
    return int(tied[np.argmin(ids[tied])])


def mmr_select(
    query_vec: EmbeddingVector,
    candidates: Sequence[tuple[int, EmbeddingVector, float]],
    k: int,
    lam: float,
) -> list[int]:
    """Greedy maximal marginal relevance over ``(id, vector, score)`` candidates.

    Relevance is the cosine to ``query_vec``; the first pick is the most
    relevant candidate and each later pick maximises
    ``lam * relevance - (1 - lam) * max similarity to the picks so far``.
    """
    n = min(k, len(candidates))
    if n <= 0:
        return []
    ids = np.array([c[0] for c in candidates])
    mat = np.stack([c[1].values for c in candidates])
    rel = mat @ query_vec.values
    remaining = np.ones(len(candidates), dtype=bool)

    first = _pick(quantize(rel), ids, remaining)
    chosen = [first]
    remaining[first] = False
    max_sim = mat @ mat[first]
    while len(chosen) < n:
        objective = quantize(lam * rel - (1.0 - lam) * max_sim)
        j = _pick(objective, ids, remaining)
        chosen.append(j)
        remaining[j] = False
        max_sim = np.maximum(max_sim, mat @ mat[j])
    return [int(ids[i]) for i in chosen]


class VectorStore:
    """Flat in-memory index of labeled entries, one matrix per category.

    Inserts are serialized by an internal lock; queries work on the snapshot
    of rows present when they start.
    """

    def __init__(self, embedder: Embedder | None = None, prompt_cap: int = PROMPT_VIEW_CAP):
        self.embedder = embedder
        self.prompt_cap = prompt_cap
        self._lock = threading.Lock()
        self._entries: list[StoredEntry] = []
        self._records: dict[int, CrawlRecord] = {}
        self._index: dict[int, int] = {}
        self._dims: int | None = None
        self._mats: dict[Category, np.ndarray] = {}
        self._labels = np.zeros(0, dtype=np.int8)
        self._ids = np.zeros(0, dtype=np.int64)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, record_id: int) -> bool:
        return record_id in self._index

    @property
    def dims(self) -> int | None:
        return self._dims

    def entries(self) -> list[StoredEntry]:
        return list(self._entries)

    def entry(self, record_id: int) -> StoredEntry:
        return self._entries[self._index[record_id]]

    def record(self, record_id: int) -> CrawlRecord | None:
        return self._records.get(record_id)

    def count(self, label: Label | str) -> int:
        code = _LABEL_CODE[Label(label)]
        return int(np.count_nonzero(self._labels[: len(self)] == code))

    # -- writes --------------------------------------------------------------

    def vectors_for(self, record: CrawlRecord) -> dict[Category, EmbeddingVector]:
        if self.embedder is None:
            raise RuntimeError("store has no embedder")
        texts = [canonical_text(record, c) for c in ALL_CATEGORIES]
        return dict(zip(ALL_CATEGORIES, self.embedder.embed_many(texts)))

    def insert(self, record: CrawlRecord, label: Label | str) -> StoredEntry:
        label = Label(label)
        if label is Label.UNLABELED:
            raise ValueError("insert needs label Success or Failed")
        if record.id in self._index:
            raise DuplicateRecordError(f"record id {record.id} already stored")
        labeled = record.labeled(label)
        entry = StoredEntry(record.id, label, self.vectors_for(record), prompt_view(labeled, self.prompt_cap))
        self.add(entry, labeled)
        return entry

    def add(self, entry: StoredEntry, record: CrawlRecord | None = None) -> None:
        with self._lock:
            if entry.record_id in self._index:
                raise DuplicateRecordError(f"record id {entry.record_id} already stored")
            if self._dims is None:
                self._dims = entry.dims
                self._mats = {c: np.zeros((64, entry.dims)) for c in ALL_CATEGORIES}
                self._labels = np.zeros(64, dtype=np.int8)
                self._ids = np.zeros(64, dtype=np.int64)
            elif entry.dims != self._dims:
                raise ValueError(f"entry dims {entry.dims} != store dims {self._dims}")
            n = len(self._entries)
            if n == self._labels.shape[0]:
                self._grow()
            for c in ALL_CATEGORIES:
                self._mats[c][n] = entry.vectors[c].values
            self._labels[n] = _LABEL_CODE[entry.label]
            self._ids[n] = entry.record_id
            self._index[entry.record_id] = n
            if record is not None:
                self._records[entry.record_id] = record
            self._entries.append(entry)

    def _grow(self) -> None:
        cap = self._labels.shape[0] * 2
        for c in ALL_CATEGORIES:
            grown = np.zeros((cap, self._dims))
            grown[: self._mats[c].shape[0]] = self._mats[c]
            self._mats[c] = grown
        self._labels = np.concatenate([self._labels, np.zeros_like(self._labels)])
        self._ids = np.concatenate([self._ids, np.zeros_like(self._ids)])

    # -- queries ----------------------------------------------------------------

    def _snapshot(self):
        with self._lock:
            n = len(self._entries)
            return n, dict(self._mats), self._labels, self._ids, self._entries[:n]

    def _query_vectors(self, query) -> Mapping[Category, EmbeddingVector]:
        if isinstance(query, CrawlRecord):
            return self.vectors_for(query)
        return {Category(k): v for k, v in query.items()}

    def threshold_candidates(self, query, label: Label | str, params: RetrievalParams | None = None):
        """Entries of ``label`` whose best per-category cosine reaches the threshold.

        Returns ``(entry, score)`` pairs sorted by score descending, then id.
        """
        params = params or RetrievalParams()
        qv = self._query_vectors(query)
        return self._candidates(qv, Label(label), params)[0]

    def _candidates(self, qv, label: Label, params: RetrievalParams):
        n, mats, labels, ids, entries = self._snapshot()
        if n == 0:
            return [], None, entries
        rows = np.nonzero(labels[:n] == _LABEL_CODE[label])[0]
        if rows.size == 0:
            return [], mats, entries
        scores = None
        for c in SEARCH_CATEGORIES:
            s = mats[c][rows] @ qv[c].values
            scores = s if scores is None else np.maximum(scores, s)
        scores = quantize(np.clip(scores, -1.0, 1.0))
        keep = scores >= params.threshold
        rows, scores = rows[keep], scores[keep]
        order = np.lexsort((ids[rows], -scores))
        return [(entries[rows[i]], float(scores[i])) for i in order], mats, entries

    def retrieve_examples(self, query, params: RetrievalParams | None = None) -> RetrievedExamples:
        params = params or RetrievalParams()
        qv = self._query_vectors(query)
        out = RetrievedExamples()
        for label in (Label.SUCCESS, Label.FAILED):
            cands, _, _ = self._candidates(qv, label, params)
            picked = mmr_select(
                qv[Category.FULL],
                [(e.record_id, e.vectors[Category.FULL], s) for e, s in cands],
                params.per_label_k,
                params.lam,
            )
            views = [self.entry(i).prompt_view for i in picked]
            if label is Label.SUCCESS:
                out.successes, out.success_ids = views, picked
            else:
                out.failures, out.failure_ids = views, picked
        return out

    # -- persistence --------------------------------------------------------------

    def save(self, records_path, vectors_path) -> None:
        with self._lock:
            entries = list(self._entries)
            recs = [self._records[e.record_id] for e in entries if e.record_id in self._records]
        if len(recs) != len(entries):
            raise StoreFileError("some entries have no backing record; cannot save")
        persist(records_path, recs)
        write_jsonl(vectors_path, (e.to_dict() for e in entries))

    def append_saved(self, records_path, vectors_path, record_id: int) -> None:
        """Append one stored entry to existing store files."""
        e = self.entry(record_id)
        persist(records_path, [self._records[record_id]], append=True)
        write_jsonl(vectors_path, [e.to_dict()], append=True)

    @classmethod
    def load(cls, records_path, vectors_path, embedder: Embedder | None = None, prompt_cap: int = PROMPT_VIEW_CAP):
        store = cls(embedder, prompt_cap)
        recs = {r.id: r for r in records_mod.load(records_path)}
        seen = set()
        for row in JsonLinesReader(vectors_path):
            rid = int(row["record_id"])
            rec = recs.get(rid)
            if rec is None:
                raise StoreFileError(f"vector entry {rid} has no record; run reindex")
            if rec.label.value != row["label"]:
                raise StoreFileError(f"label mismatch for record {rid}; run reindex")
            vectors = {Category(c): EmbeddingVector(np.array(v)) for c, v in row["vectors"].items()}
            if any(v.dims != int(row["dims"]) for v in vectors.values()):
                raise StoreFileError(f"dims mismatch for record {rid}")
            store.add(StoredEntry(rid, rec.label, vectors, prompt_view(rec, prompt_cap)), rec)
            seen.add(rid)
        missing = set(recs) - seen
        if missing:
            raise StoreFileError(f"{len(missing)} records have no vectors; run reindex")
        return store

    @classmethod
    def from_records(cls, records: Iterable[CrawlRecord], embedder: Embedder, prompt_cap: int = PROMPT_VIEW_CAP):
        store = cls(embedder, prompt_cap)
        for rec in records:
            if rec.label is Label.UNLABELED:
                raise ValueError(f"record {rec.id} is unlabeled")
            entry = StoredEntry(rec.id, rec.label, store.vectors_for(rec), prompt_view(rec, prompt_cap))
            store.add(entry, rec)
        return store


def reindex(records_path, vectors_path, embedder: Embedder, prompt_cap: int = PROMPT_VIEW_CAP) -> VectorStore:
    """Rebuild the vector sidecar from the record file."""
    store = VectorStore.from_records(records_mod.load(records_path), embedder, prompt_cap)
    Path(vectors_path).parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(vectors_path, (e.to_dict() for e in store.entries()))
    return store
