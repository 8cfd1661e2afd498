"""End-to-end acceptance checks, one test per criterion."""

import json
import random
import time
from collections import defaultdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pytest

from acceptance_log import record
from factories import make_record
from oracles import brute_mmr, brute_retrieve, dot, unit
from replies import CASES
from parrot.advisor import AdviceUnavailable, LlmConfig, build_prompt, request_profile
from parrot.catalog import Catalog
from parrot.cloaksim import CorpusIntel, SimServer, generate_corpus
from parrot.config import Mode, RunConfig
from parrot.crawler import PlainHttpBackend, collect_domain_info, profiled_access
from parrot.detector import MarkerDetector, Verdict
from parrot.embedding import Embedder, EmbeddingVector
from parrot.evaluation import EvalReport, confusion, evaluate
from parrot.pipeline import ADVICE_UNAVAILABLE, Pipeline
from parrot.records import CrawlRecord, Label, RecordIds, load
from parrot.retrieval import RetrievalParams, StoredEntry, VectorStore, mmr_select, reindex

CAT = Catalog()
GOLDEN = Path(__file__).parent / "golden"
CATS = ("Domain", "Network", "Html", "Full")


# -- closed loop shared by criteria 1, 2 and 9 ---------------------------------------------


def _bypass(scenarios, recs):
    hits = sum(s.marker in r.final.html.visible_text for s, r in zip(scenarios, recs))
    return hits / len(scenarios)


@pytest.fixture(scope="module")
def closed_loop():
    t0 = time.perf_counter()
    corpus = generate_corpus(8, 25, 42)
    families = defaultdict(list)
    for s in corpus:
        families[s.family].append(s)
    seeds = [s for members in families.values() for s in members[:12]]
    held = [s for members in families.values() for s in members[12:]]
    benign = sorted({s.legit_url for s in corpus})
    intel = CorpusIntel(corpus)
    entries = CAT.enumerate()
    pass_share = max(
        sum(s.verdict(e.headers, CAT.locations[e.location]["code"], e.network) for e in entries) / len(entries)
        for s in corpus
    )

    cfg = RunConfig(llm=LlmConfig(backend="mock"), collectors="offline", records_path=None, vectors_path=None,
                    concurrency=4, seed=42)
    store = VectorStore(Embedder(cfg.embedder))
    with SimServer(corpus, keep_log=False) as sim:
        proxies, backend, ids = sim.proxy_map(), PlainHttpBackend(), RecordIds()
        for s in seeds:
            domain, _ = collect_domain_info(s.url, intel.collectors())
            for e in entries:
                fetch = profiled_access(s.url, e, None, backend, CAT, proxies)
                rec = CrawlRecord(ids.next(), s.url, datetime.now(timezone.utc), domain, fetch.network, fetch.html,
                                  fetch.environment)
                ok = s.verdict(e.headers, CAT.locations[e.location]["code"], e.network)
                store.insert(rec, Label.SUCCESS if ok else Label.FAILED)
        seeded = {e.record_id for e in store.entries()}
        seed_time = time.perf_counter() - t0

        pipe = Pipeline(cfg, catalog=CAT, proxies=proxies, backend=backend, store=store,
                        detector=MarkerDetector(), collectors=intel.collectors())
        urls = [s.url for s in held] + benign
        truth = {s.url: Verdict.PHISHING.value for s in held} | {u: Verdict.NON_PHISHING.value for u in benign}
        pass1 = pipe.run_batch(urls, list(Mode), truth=truth, feedback=True)
        loop_time = time.perf_counter() - t0
        after_pass1 = {e.record_id: e.label for e in store.entries()}

        pass2 = pipe.run_batch([s.url for s in held], [Mode.PARROT], feedback=False)

    by_mode = defaultdict(list)
    for r in pass1:
        by_mode[r.mode].append(r)
    return dict(held=held, benign=benign, truth=truth, by_mode=by_mode, pass2=pass2, seeded=seeded,
                after_pass1=after_pass1, store_size=len(seeded), pass_share=pass_share, seed_time=seed_time,
                loop_time=loop_time, n_success=sum(1 for i in seeded if store.entry(i).label is Label.SUCCESS))


@pytest.mark.slow
def test_criterion_01_closed_loop_bypass(closed_loop):
    held = closed_loop["held"]
    n = len(held)
    parrot = _bypass(held, closed_loop["by_mode"][Mode.PARROT][:n])
    standard = _bypass(held, closed_loop["by_mode"][Mode.STANDARD][:n])
    ok = parrot >= 0.70 and standard <= 0.15 and closed_loop["pass_share"] <= 0.10 and closed_loop["loop_time"] < 600
    detail = (f"Parrot {parrot:.1%}, Standard {standard:.1%} on {n} held-out; store {closed_loop['store_size']} "
              f"({closed_loop['n_success']} Success); max pass share {closed_loop['pass_share']:.1%}; "
              f"{closed_loop['loop_time']:.0f}s")
    assert record(1, "closed-loop bypass", ok, detail), detail


@pytest.mark.slow
def test_criterion_02_baseline_ordering(closed_loop):
    acc = {m: evaluate(closed_loop["by_mode"][m], closed_loop["truth"]).acc for m in Mode}
    ok = acc[Mode.PARROT] > acc[Mode.TYPICAL] > acc[Mode.STANDARD]
    detail = ", ".join(f"{m.value} {acc[m]:.3f}" for m in Mode)
    assert record(2, "accuracy Parrot > TypicalUser > Standard", ok, detail), detail


@pytest.mark.slow
def test_criterion_09_feedback_growth(closed_loop):
    held, truth, by_mode = closed_loop["held"], closed_loop["truth"], closed_loop["by_mode"]
    expected: dict[int, Label] = {}
    for p, s, t in zip(by_mode[Mode.PARROT], by_mode[Mode.STANDARD], by_mode[Mode.TYPICAL]):
        if p.verdict is Verdict.PHISHING and s.verdict is Verdict.NON_PHISHING and t.verdict is Verdict.NON_PHISHING:
            expected |= {p.final.id: Label.SUCCESS, s.final.id: Label.FAILED, t.final.id: Label.FAILED}
        elif p.verdict is Verdict.NON_PHISHING and truth.get(p.url) == Verdict.PHISHING.value:
            expected[p.final.id] = Label.FAILED
    grown = {i: lab for i, lab in closed_loop["after_pass1"].items() if i not in closed_loop["seeded"]}
    first = _bypass(held, by_mode[Mode.PARROT][: len(held)])
    second = _bypass(held, closed_loop["pass2"])
    ok = len(grown) > 0 and grown == expected and second >= first
    detail = f"+{len(grown)} inserts ({sum(v is Label.SUCCESS for v in grown.values())} Success); " \
             f"bypass {first:.1%} then {second:.1%}"
    assert record(9, "feedback growth and non-degradation", ok, detail), detail


# -- retrieval -------------------------------------------------------------------------------


def _random_store(rng):
    dims = rng.randint(2, 4)
    store, entries = VectorStore(), []
    for rid in rng.sample(range(1, 50), rng.randint(1, 12)):
        vs = {}
        for c in CATS:
            v = [rng.choice([0.0, 0.0, 1.0, 2.0, -1.0]) for _ in range(dims)]
            if not any(v):
                v[rng.randrange(dims)] = 1.0
            vs[c] = v
        label = rng.choice(["Success", "Failed"])
        store.add(StoredEntry(rid, label, {c: EmbeddingVector.normalized(v) for c, v in vs.items()}, f"v{rid}"))
        entries.append({"id": rid, "label": label, "vectors": {c: unit(v) for c, v in vs.items()}})
    q = {c: unit([rng.choice([0.0, 1.0, 2.0]) + (1.0 if i == 0 else 0.0) for i in range(dims)]) for c in CATS}
    return store, entries, q


def test_criterion_03_retrieval_oracle_equivalence():
    rng = random.Random(3)
    mismatches = 0
    for _ in range(100):
        store, entries, q = _random_store(rng)
        params = RetrievalParams(threshold=rng.choice([0.0, 0.3, 0.5, 0.65, 0.9]), lam=rng.choice([0.0, 0.5, 0.7, 1.0]),
                                 per_label_k=rng.randint(1, 6))
        ex = store.retrieve_examples({c: EmbeddingVector.normalized(v) for c, v in q.items()}, params)
        want = brute_retrieve(q, entries, params.threshold, params.lam, params.per_label_k)
        mismatches += (ex.success_ids, ex.failure_ids) != (want["Success"], want["Failed"])
    assert record(3, "retrieval matches brute force on 100 stores", mismatches == 0, f"{mismatches} mismatches")


def test_criterion_04_mmr_properties():
    rng = random.Random(4)
    failures = 0
    for _ in range(50):
        dims, n = rng.randint(2, 5), rng.randint(1, 10)
        q = EmbeddingVector.normalized([rng.uniform(-1, 1) for _ in range(dims)] + [1.0])
        cands = [(i, EmbeddingVector.normalized([rng.uniform(-1, 1) for _ in range(dims)] + [0.5]), 0.0)
                 for i in rng.sample(range(1, 100), n)]
        topk = sorted(cands, key=lambda c: (-round(dot(c[1].values.tolist(), q.values.tolist()), 12), c[0]))
        full = mmr_select(q, cands, n, 0.7)
        for k in range(1, n + 1):
            failures += mmr_select(q, cands, k, 1.0) != [c[0] for c in topk[:k]]
            failures += mmr_select(q, cands, k, 0.7) != full[:k]
        failures += full != brute_mmr(q.values.tolist(), [(i, v.values.tolist()) for i, v, _ in cands], n, 0.7)
    assert record(4, "MMR top-k at lambda=1 and greedy prefix", failures == 0, f"{failures} violations on 50 instances")


# -- catalog, prompt, metrics ------------------------------------------------------------------


def test_criterion_05_catalog_shape():
    entries = CAT.enumerate()
    pairs = {(e.os, e.browser) for e in entries}
    bad_safari = [e for e in entries if e.browser == "Safari" and e.os in ("Windows", "Linux", "Android")]
    ok = (len(entries), len(pairs), len({e.location for e in entries}), len({e.network for e in entries}),
          len(bad_safari)) == (510, 17, 10, 3, 0)
    detail = f"{len(entries)} entries, {len(pairs)} pairs, {len(bad_safari)} Safari outside Apple"
    assert record(5, "catalog enumeration", ok, detail), detail


def test_criterion_06_prompt_fidelity():
    fx = json.loads((GOLDEN / "fixture.json").read_text())
    bundle = build_prompt(fx["url"], fx["successes"], fx["failures"])
    ok = ((bundle.system_text + "\n").encode() == (GOLDEN / "system.txt").read_bytes()
          and (bundle.user_text + "\n").encode() == (GOLDEN / "user_fixture.txt").read_bytes())
    assert record(6, "prompt byte-equal to golden files", ok)


def test_criterion_07_metrics():
    pairs = [("Phishing", "Phishing")] * 9 + [("NonPhishing", "Phishing")] + \
            [("NonPhishing", "NonPhishing")] * 8 + [("Phishing", "NonPhishing")] * 2
    r = confusion(pairs)
    got = (r.acc, r.tpr, r.tnr, r.precision, r.f1)
    close = all(abs(a - b) <= 1e-4 for a, b in zip(got, (0.85, 0.9, 0.8, 0.8182, 0.8571)))
    empty = EvalReport(tp=0, fp=0, tn=4, fn=0).to_dict()
    ok = close and empty["precision"] == empty["tpr"] == empty["f1"] == "undefined" and empty["acc"] == 1.0
    assert record(7, "confusion example and undefined cases", ok, ", ".join(f"{x:.4f}" for x in got))


# -- parsing robustness --------------------------------------------------------------------------


def test_criterion_08_robust_parsing():
    cfg = LlmConfig(backoff=0.0)
    bundle = build_prompt("http://x.test/", [], [])
    wrong = []
    for name, reply, expected in CASES:
        try:
            rec = request_profile(bundle, cfg, lambda b, r=reply: r)
            got = (rec.ip_location, rec.network_provider, rec.user_agent)
        except AdviceUnavailable:
            got = None
        if got != expected:
            wrong.append(name)

    corpus = generate_corpus(1, 1, 42)
    fallbacks = 0
    with SimServer(corpus, keep_log=False) as sim:
        run_cfg = RunConfig(llm=LlmConfig(backend="mock", backoff=0.0), collectors="offline",
                            records_path=None, vectors_path=None)
        for name, reply, expected in CASES:
            if expected is not None:
                continue
            pipe = Pipeline(run_cfg, catalog=CAT, proxies=sim.proxy_map(), llm=lambda b, r=reply: r,
                            detector=MarkerDetector(), collectors=CorpusIntel(corpus).collectors())
            rec = pipe.process_url(corpus[0].url)
            if rec.entry is CAT.standard and ADVICE_UNAVAILABLE in rec.degradation and rec.final is not None:
                fallbacks += 1
            else:
                wrong.append(f"{name}:pipeline")
    n_bad = sum(e is None for _, _, e in CASES)
    ok = not wrong and len(CASES) == 30 and fallbacks == n_bad
    detail = f"{len(CASES)} replies, {n_bad} fall back to Standard" + (f"; wrong: {wrong}" if wrong else "")
    assert record(8, "reply parsing and fallback chain", ok, detail), detail


# -- persistence ---------------------------------------------------------------------------------


def test_criterion_10_persistence(tmp_path):
    emb = Embedder()
    rng = random.Random(10)
    words = ["login", "verify", "account", "bank", "parcel", "delivery", "card", "secure", "update", "pay"]
    recs = []
    for i in range(1, 1001):
        text = " ".join(rng.choice(words) for _ in range(rng.randint(5, 40)))
        rec = make_record(i, url=f"http://s{i}.site{i % 97}.test/p", domain=f"s{i}.site{i % 97}.test", text=text,
                          status=rng.choice([200, 302, 403]), country=rng.choice(["JP", "US", "DE"]))
        recs.append(rec.labeled(rng.choice([Label.SUCCESS, Label.FAILED])))
    rp, vp = tmp_path / "records.jsonl", tmp_path / "vectors.jsonl"

    t0 = time.perf_counter()
    store = VectorStore.from_records(recs, emb)
    store.save(rp, vp)
    loaded = VectorStore.load(rp, vp, emb)
    vp.unlink()
    rebuilt = reindex(rp, vp, emb)
    elapsed = time.perf_counter() - t0

    lossless = list(load(rp)) == recs
    for other in (loaded, rebuilt):
        for a in store.entries():
            b = other.entry(a.record_id)
            lossless &= (a.label, a.prompt_view) == (b.label, b.prompt_view)
            lossless &= all(np.array_equal(a.vectors[c].values, b.vectors[c].values) for c in a.vectors)
        lossless &= len(other) == 1000
    ok = lossless and elapsed < 10
    assert record(10, "1,000-record round trip", ok, f"lossless={lossless}, {elapsed:.2f}s"), elapsed
