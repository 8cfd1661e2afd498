import math
import random

import numpy as np
import pytest
from hypothesis import given, strategies as st

from factories import make_record
from oracles import brute_mmr, brute_retrieve, unit
from parrot.embedding import Embedder, EmbedderConfig, EmbeddingVector
from parrot.records import Category, Label, load
from parrot.retrieval import (
    DuplicateRecordError,
    RetrievalParams,
    StoreFileError,
    StoredEntry,
    VectorStore,
    mmr_select,
    reindex,
)

CATS = ("Domain", "Network", "Html", "Full")


def vec(values):
    return EmbeddingVector.normalized(np.array(values, dtype=float))


def entry(rid, label, domain, network, html, full=None):
    vs = {"Domain": vec(domain), "Network": vec(network), "Html": vec(html), "Full": vec(full or domain)}
    return StoredEntry(rid, label, vs, f"view-{rid}")


E = [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]]


def query(domain=E[0], network=E[1], html=E[2], full=E[0]):
    return {c: vec(v) for c, v in zip(CATS, (domain, network, html, full))}


def test_params_validation():
    RetrievalParams()
    for bad in ({"threshold": 1.5}, {"threshold": -0.1}, {"lam": 2}, {"per_label_k": -1}):
        with pytest.raises(ValueError):
            RetrievalParams(**bad)


def test_empty_store_returns_nothing():
    store = VectorStore()
    assert store.threshold_candidates(query(), "Success") == []
    ex = store.retrieve_examples(query())
    assert ex.empty and ex.successes == [] and ex.failures == []


def test_hand_built_six_entry_threshold():
    c65 = math.sqrt(1 - 0.65**2)
    store = VectorStore()
    store.add(entry(1, "Success", E[0], E[3], E[3]))                    # Domain equal: 1.0
    store.add(entry(2, "Success", E[3], [0, 0.8, 0, 0.6], E[3]))        # Network 0.8
    store.add(entry(3, "Success", E[3], E[3], [0, 0, 0.6, 0.8]))        # Html 0.6: out
    store.add(entry(4, "Success", [0.65, 0, 0, c65], E[3], E[3]))       # Domain 0.65: boundary, in
    store.add(entry(5, "Success", [0.5, 0, 0, 0.866], [0, 0.5, 0, 0.866], [0, 0, 0.5, 0.866]))  # ~0.5 everywhere: out
    store.add(entry(6, "Success", E[3], [0, 0.9, 0, math.sqrt(0.19)], E[3]))  # Network 0.9
    got = store.threshold_candidates(query(), "Success", RetrievalParams(threshold=0.65))
    assert [(e.record_id, round(s, 6)) for e, s in got] == [(1, 1.0), (6, 0.9), (2, 0.8), (4, 0.65)]


def test_domain_only_match_is_enough():
    store = VectorStore()
    store.add(entry(7, "Failed", E[0], E[3], E[3]))
    [(e, s)] = store.threshold_candidates(query(), "Failed")
    assert e.record_id == 7 and s == 1.0


def test_label_isolation():
    store = VectorStore()
    store.add(entry(1, "Success", E[0], E[0], E[0]))
    store.add(entry(2, "Failed", E[0], E[0], E[0]))
    assert [e.record_id for e, _ in store.threshold_candidates(query(), "Success")] == [1]
    ex = store.retrieve_examples(query())
    assert ex.success_ids == [1] and ex.failure_ids == [2]


def test_mmr_six_candidates_matches_greedy_trace():
    q = vec([1, 0.2, 0.1])
    raw = {1: [1, 0, 0], 2: [0.9, 0.1, 0], 3: [0.6, 0.8, 0], 4: [0.7, 0, 0.7], 5: [0.2, 0.9, 0.3], 6: [1, 0.2, 0.1]}
    cands = [(i, vec(v), 0.0) for i, v in raw.items()]
    # frozen from the brute-force greedy oracle
    assert mmr_select(q, cands, 3, 0.7) == [6, 2, 1]
    assert mmr_select(q, cands, 6, 0.7) == [6, 2, 1, 4, 3, 5]
    assert mmr_select(q, cands, 10, 0.7) == [6, 2, 1, 4, 3, 5]
    assert mmr_select(q, cands, 0, 0.7) == []
    assert mmr_select(q, [], 3, 0.7) == []


def test_mmr_ties_go_to_lower_id():
    q = vec([1, 0, 0])
    same = vec([0.6, 0.8, 0])
    assert mmr_select(q, [(9, same, 0), (3, same, 0), (5, same, 0)], 3, 0.5) == [3, 5, 9]


vectors3 = st.lists(st.floats(-1, 1, allow_nan=False), min_size=3, max_size=3).filter(lambda v: any(abs(x) > 1e-3 for x in v))


@given(q=vectors3, vs=st.lists(vectors3, min_size=1, max_size=8), lam=st.sampled_from([0.0, 0.3, 0.7, 1.0]))
def test_mmr_matches_oracle_and_prefix(q, vs, lam):
    qv = vec(q)
    cands = [(i + 1, vec(v), 0.0) for i, v in enumerate(vs)]
    full = mmr_select(qv, cands, len(cands), lam)
    assert full == brute_mmr(qv.values.tolist(), [(i, v.values.tolist()) for i, v, _ in cands], len(cands), lam)
    assert len(set(full)) == len(full)
    for k in range(len(cands) + 1):
        assert mmr_select(qv, cands, k, lam) == full[:k]


def _fixture_store(n, dims, seed):
    rng = random.Random(seed)
    store = VectorStore()
    entries = []
    for rid in range(1, n + 1):
        vs = {c: [rng.choice([0.0, 0.0, 1.0, 2.0]) for _ in range(dims)] for c in CATS}
        for c in CATS:
            if not any(vs[c]):
                vs[c][0] = 1.0
        label = "Success" if rng.random() < 0.5 else "Failed"
        store.add(StoredEntry(rid, label, {c: vec(v) for c, v in vs.items()}, f"v{rid}"))
        entries.append({"id": rid, "label": label, "vectors": {c: unit(v) for c, v in vs.items()}})
    return store, entries, rng


def test_twenty_entry_fixture_exact_ids():
    store, entries, rng = _fixture_store(20, 3, seed=7)
    q = {c: unit([1.0, 1.0, 0.0]) for c in CATS}
    ex = store.retrieve_examples({c: vec(v) for c, v in q.items()}, RetrievalParams(threshold=0.5))
    want = brute_retrieve(q, entries, 0.5, 0.7, 5)
    assert (ex.success_ids, ex.failure_ids) == (want["Success"], want["Failed"])
    # frozen from the brute-force oracle
    assert (ex.success_ids, ex.failure_ids) == ([14, 2, 10, 9, 19], [20, 5, 12, 7, 15])
    assert ex.successes == [f"v{i}" for i in ex.success_ids]


def test_sparse_labels_are_not_padded():
    store = VectorStore()
    for rid in (1, 2):
        store.add(entry(rid, "Success", E[0], E[0], E[0]))
    for rid in range(3, 10):
        store.add(entry(rid, "Failed", E[0], [1, 0.1 * rid, 0, 0], E[0]))
    ex = store.retrieve_examples(query())
    assert (len(ex.successes), len(ex.failures)) == (2, 5)


@given(st.integers(0, 10_000), st.floats(0, 1), st.sampled_from(["Success", "Failed"]))
def test_candidate_scores_sorted_and_above_threshold(seed, threshold, label):
    store, _, rng = _fixture_store(12, 4, seed)
    q = {c: vec([rng.random() + 0.01 for _ in range(4)]) for c in CATS}
    got = store.threshold_candidates(q, label, RetrievalParams(threshold=threshold))
    scores = [s for _, s in got]
    assert all(s >= threshold for s in scores)
    assert scores == sorted(scores, reverse=True)
    assert all(e.label.value == label for e, _ in got)


# -- with real records --------------------------------------------------------------


def test_insert_then_query_identical_record():
    store = VectorStore(Embedder(EmbedderConfig()))
    rec = make_record(5)
    store.insert(rec, "Success")
    [(e, score)] = store.threshold_candidates(rec, "Success")
    assert e.record_id == 5 and score == 1.0
    qv = store.vectors_for(rec)
    for c in Category:
        assert float(qv[c].values @ e.vectors[c].values) == pytest.approx(1.0, abs=1e-12)
    assert store.record(5).label is Label.SUCCESS


def test_duplicate_and_unlabeled_inserts_rejected():
    store = VectorStore(Embedder(EmbedderConfig()))
    store.insert(make_record(1), "Failed")
    with pytest.raises(DuplicateRecordError):
        store.insert(make_record(1), "Failed")
    with pytest.raises(ValueError):
        store.insert(make_record(2), "Unlabeled")


def test_stored_entry_invariants():
    with pytest.raises(ValueError):
        StoredEntry(1, "Unlabeled", {c: vec(E[0]) for c in CATS})
    with pytest.raises(ValueError):
        StoredEntry(1, "Success", {c: vec(E[0]) for c in CATS[:3]})
    with pytest.raises(ValueError):
        StoredEntry(1, "Success", {**{c: vec(E[0]) for c in CATS[:3]}, "Full": vec([1, 0])})


def _corpus(n_success, n_failed):
    recs = []
    for i in range(n_success + n_failed):
        label = "Success" if i < n_success else "Failed"
        rec = make_record(i + 1, url=f"http://site{i % 50}.test/p{i}", domain=f"site{i % 50}.test",
                          text=f"page {i % 37} login verify {i % 11}", status=200 if label == "Success" else 403)
        recs.append(rec.labeled(label))
    return recs


def test_store_of_realistic_size_loads_and_answers(tmp_path):
    emb = Embedder(EmbedderConfig())
    store = VectorStore.from_records(_corpus(624, 1223), emb)
    assert (store.count("Success"), store.count("Failed"), len(store)) == (624, 1223, 1847)
    rp, vp = tmp_path / "r.jsonl", tmp_path / "v.jsonl"
    store.save(rp, vp)
    loaded = VectorStore.load(rp, vp, emb)
    assert len(loaded) == 1847
    ex = loaded.retrieve_examples(make_record(99999, domain="site3.test", text="page 3 login verify 3"))
    assert len(ex.successes) == 5 and len(ex.failures) == 5


def test_save_load_reindex_round_trip(tmp_path):
    emb = Embedder(EmbedderConfig())
    store = VectorStore.from_records(_corpus(5, 5), emb)
    rp, vp = tmp_path / "r.jsonl", tmp_path / "v.jsonl"
    store.save(rp, vp)
    loaded = VectorStore.load(rp, vp, emb)
    for a, b in zip(store.entries(), loaded.entries()):
        assert a.record_id == b.record_id and a.label == b.label and a.prompt_view == b.prompt_view
        assert all(a.vectors[c] == b.vectors[c] for c in Category)
    vp.unlink()
    rebuilt = reindex(rp, vp, emb)
    assert [e.record_id for e in rebuilt.entries()] == [e.record_id for e in store.entries()]
    assert vp.exists()


def test_append_saved_extends_files(tmp_path):
    emb = Embedder(EmbedderConfig())
    store = VectorStore.from_records(_corpus(2, 2), emb)
    rp, vp = tmp_path / "r.jsonl", tmp_path / "v.jsonl"
    store.save(rp, vp)
    store.insert(make_record(100), "Success")
    store.append_saved(rp, vp, 100)
    assert len(VectorStore.load(rp, vp, emb)) == 5


def test_load_detects_mismatch(tmp_path):
    emb = Embedder(EmbedderConfig())
    store = VectorStore.from_records(_corpus(2, 2), emb)
    rp, vp = tmp_path / "r.jsonl", tmp_path / "v.jsonl"
    store.save(rp, vp)
    lines = vp.read_text().splitlines()
    vp.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(StoreFileError, match="no vectors"):
        VectorStore.load(rp, vp, emb)
    recs = list(load(rp))
    from parrot.records import persist
    persist(rp, recs[:-1])
    vp.write_text("\n".join(lines) + "\n")
    with pytest.raises(StoreFileError, match="no record"):
        VectorStore.load(rp, vp, emb)


def test_from_records_rejects_unlabeled():
    with pytest.raises(ValueError):
        VectorStore.from_records([make_record(1)], Embedder(EmbedderConfig()))
