"""Per-URL orchestration, batch runs, the feedback loop and URL intake."""

from __future__ import annotations

import hashlib
import json
import logging
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence
from urllib.parse import urlsplit

from . import advisor
from .advisor import AdviceUnavailable, build_prompt, request_profile
from .catalog import Catalog, CatalogEntry, MatchQuality, ProxyMap
from .config import Mode, RunConfig
from .crawler import DomainCollectors, collect_domain_info, make_backend, preliminary_access, profiled_access
from .crawler.domain import NXDOMAIN, host_of, is_ip_literal, registrable_domain
from .crawler.fetch import FetchResult, ProxyError
from .detector import DetectorError, Verdict, make_detector
from .embedding import Embedder
from .records import CrawlRecord, HtmlInfo, Label, NetworkInfo, RecordIds, write_jsonl
from .retrieval import VectorStore

logger = logging.getLogger(__name__)

# degradation flags
NO_EXAMPLES = "no-examples"
ADVICE_UNAVAILABLE = "advice-unavailable"
PROXY_ERROR = "proxy-error"
FETCH_ERROR = "fetch-error"
DETECTOR_ERROR = "detector-error"


@dataclass
class UrlVerdictRecord:
    url: str
    mode: Mode
    entry: CatalogEntry
    verdict: Verdict
    final: CrawlRecord | None
    preliminary: CrawlRecord | None = None
    recommendation: dict | None = None
    match_quality: str | None = None
    timings: dict[str, float] = field(default_factory=dict)
    degradation: list[str] = field(default_factory=list)
    audit: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        if any(v < 0 for v in self.timings.values()):
            raise ValueError("timings must be >= 0")
        if self.mode is Mode.PARROT and self.recommendation is None and ADVICE_UNAVAILABLE not in self.degradation:
            raise ValueError("Parrot records need a recommendation or a fallback flag")

    @property
    def fetched_at(self) -> datetime | None:
        return self.final.fetched_at if self.final else None

    def to_dict(self) -> dict:
        return {
            "url": self.url,
            "mode": self.mode.value,
            "entry": self.entry.to_dict(),
            "verdict": self.verdict.value,
            "recommendation": self.recommendation,
            "match_quality": self.match_quality,
            "final_record_id": self.final.id if self.final else None,
            "preliminary_record_id": self.preliminary.id if self.preliminary else None,
            "fetched_at": self.fetched_at.isoformat() if self.fetched_at else None,
            "timings": dict(self.timings),
            "degradation": list(self.degradation),
            "audit": self.audit,
            "warnings": list(self.warnings),
        }


@dataclass
class VerdictRow:
    """Lightweight view of a stored verdict line, enough for evaluation."""

    url: str
    mode: str
    verdict: str
    timings: dict

    @classmethod
    def from_dict(cls, d) -> "VerdictRow":
        return cls(d["url"], d["mode"], d["verdict"], d.get("timings") or {})


class _Stopwatch:
    def __init__(self, timings: dict[str, float], name: str):
        self.timings, self.name = timings, name

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.timings[self.name] = self.timings.get(self.name, 0.0) + (time.perf_counter() - self.t0)


class Pipeline:
    def __init__(
        self,
        cfg: RunConfig,
        *,
        catalog: Catalog | None = None,
        proxies: ProxyMap | None = None,
        backend=None,
        store: VectorStore | None = None,
        llm=None,
        detector=None,
        collectors: DomainCollectors | None = None,
        out_dir: str | Path | None = None,
        persist_store: bool = False,
    ):
        self.cfg = cfg
        self.catalog = catalog or (Catalog.from_file(cfg.catalog_path) if cfg.catalog_path else Catalog())
        self.proxies = proxies or (ProxyMap.from_file(cfg.proxies_path) if cfg.proxies_path else ProxyMap.direct())
        self.backend = backend or make_backend(cfg.fetch_backend, cfg.webdriver_endpoint, cfg.timeouts)
        self.store = store if store is not None else VectorStore(Embedder(cfg.embedder))
        self.llm = llm or advisor.make_backend(cfg.llm)
        self.detector = detector or make_detector(cfg.detector)
        if collectors is None:
            collectors = DomainCollectors.live() if cfg.collectors == "live" else DomainCollectors.offline()
        self.collectors = collectors
        self.out_dir = Path(out_dir) if out_dir else None
        self.persist_store = persist_store
        start = max((e.record_id for e in self.store.entries()), default=0) + 1
        self.ids = RecordIds(start)
        self._typical_rng = random.Random(cfg.seed)
        self._typical_lock = threading.Lock()
        self._feedback_lock = threading.Lock()
        self._fed: set[tuple[str, str, str]] = set()

    @classmethod
    def from_config(cls, cfg: RunConfig, out_dir=None) -> "Pipeline":
        embedder = Embedder(cfg.embedder)
        rp, vp = cfg.records_path, cfg.vectors_path
        if rp and vp and Path(rp).exists() and Path(vp).exists():
            store = VectorStore.load(rp, vp, embedder)
        else:
            store = VectorStore(embedder)
        return cls(cfg, store=store, out_dir=out_dir, persist_store=bool(rp and vp))

    # -- helpers ---------------------------------------------------------------

    def next_typical_entry(self) -> CatalogEntry:
        with self._typical_lock:
            return self._typical_rng.choice(self.catalog.enumerate())

    def _crawl_record(self, url: str, fetch: FetchResult, domain) -> CrawlRecord:
        return CrawlRecord(
            id=self.ids.next(),
            url=url,
            fetched_at=datetime.now(timezone.utc),
            domain=domain,
            network=fetch.network,
            html=fetch.html,
            environment=fetch.environment,
        )

    def _access(self, url: str, entry: CatalogEntry, extra, degr: list[str]) -> tuple[CatalogEntry, FetchResult]:
        try:
            return entry, profiled_access(url, entry, extra, self.backend, self.catalog, self.proxies)
        except ProxyError as exc:
            degr.append(PROXY_ERROR)
            logger.warning("%s: proxy failure for %s: %s", url, entry.proxy_ref, exc)
        std = self.catalog.standard
        if entry is not std:
            try:
                return std, profiled_access(url, std, None, self.backend, self.catalog, self.proxies)
            except ProxyError as exc:
                logger.warning("%s: standard egress failed too: %s", url, exc)
        env = self.catalog.environment(std)
        return std, FetchResult(NetworkInfo(), HtmlInfo(), env, error="ProxyError: no usable egress")

    def _judge(self, url: str, fetch: FetchResult, record: CrawlRecord, degr: list[str]) -> Verdict:
        rdir = self.out_dir / "results" / str(record.id) if self.out_dir else None
        try:
            return self.detector.judge(url, fetch, rdir)
        except DetectorError as exc:
            degr.append(DETECTOR_ERROR)
            logger.warning("%s: %s", url, exc)
            return Verdict.NON_PHISHING

    # -- per URL -----------------------------------------------------------------

    def process_url(self, url: str, mode: Mode | str | None = None, entry: CatalogEntry | None = None) -> UrlVerdictRecord:
        """Run one URL through the chosen mode; network faults degrade, never raise."""
        mode = Mode.parse(mode) if isinstance(mode, str) else (mode or self.cfg.mode)
        timings: dict[str, float] = {}
        degr: list[str] = []
        t0 = time.perf_counter()
        with _Stopwatch(timings, "domain"):
            domain, warnings = collect_domain_info(url, self.collectors)

        recommendation = None
        quality = None
        prelim_rec = None
        audit: dict = {}
        extra = None
        if mode is Mode.PARROT:
            with _Stopwatch(timings, "preliminary"):
                prelim = preliminary_access(url, self.backend, self.catalog, self.proxies)
            if prelim.error:
                warnings.append(f"preliminary: {prelim.error}")
            prelim_rec = self._crawl_record(url, prelim, domain)
            with _Stopwatch(timings, "retrieval"):
                examples = self.store.retrieve_examples(prelim_rec, self.cfg.retrieval)
            if examples.empty:
                degr.append(NO_EXAMPLES)
            bundle = build_prompt(url, examples.successes, examples.failures)
            replies: list = []
            audit = {
                "system_sha256": hashlib.sha256(bundle.system_text.encode("utf-8")).hexdigest(),
                "user_text": bundle.user_text,
                "success_ids": list(examples.success_ids),
                "failure_ids": list(examples.failure_ids),
                "replies": replies,
            }
            with _Stopwatch(timings, "advice"):
                try:
                    rec = request_profile(bundle, self.cfg.llm, self.llm, replies)
                    recommendation = rec.to_dict()
                    entry, q = self.catalog.match(rec)
                    quality = q.value
                    extra = rec.http_header
                except AdviceUnavailable as exc:
                    degr.append(ADVICE_UNAVAILABLE)
                    warnings.append(f"advice: {exc}")
                    entry, quality = self.catalog.standard, MatchQuality.FALLBACK.value
        elif mode is Mode.STANDARD:
            entry = self.catalog.standard
        else:
            entry = entry or self.next_typical_entry()

        with _Stopwatch(timings, "access"):
            entry, fetch = self._access(url, entry, extra, degr)
        if fetch.error:
            degr.append(FETCH_ERROR)
            warnings.append(f"access: {fetch.error}")
        final = self._crawl_record(url, fetch, domain)
        with _Stopwatch(timings, "detect"):
            verdict = self._judge(url, fetch, final, degr)
        timings["total"] = time.perf_counter() - t0
        return UrlVerdictRecord(
            url=url, mode=mode, entry=entry, verdict=verdict, final=final, preliminary=prelim_rec,
            recommendation=recommendation, match_quality=quality, timings=timings,
            degradation=degr, audit=audit, warnings=warnings,
        )

    # -- batches -----------------------------------------------------------------

    def run_batch(
        self,
        urls: Sequence[str],
        modes: Sequence[Mode] | None = None,
        truth: Mapping[str, str] | None = None,
        feedback: bool | None = None,
    ) -> list[UrlVerdictRecord]:
        """Process ``urls`` under each mode (sequential per URL, URLs in parallel).

        TypicalUser entries are drawn in input order before work starts, and
        feedback is applied after the batch in input order, so a fixed seed
        gives a reproducible run.
        """
        modes = list(modes or [self.cfg.mode])
        typical = {i: self.next_typical_entry() for i in range(len(urls))} if Mode.TYPICAL in modes else {}

        def work(i: int) -> list[UrlVerdictRecord]:
            return [self.process_url(urls[i], m, typical.get(i)) for m in modes]

        with ThreadPoolExecutor(max_workers=self.cfg.concurrency) as pool:
            per_url = list(pool.map(work, range(len(urls))))

        feedback = self.cfg.feedback if feedback is None else feedback
        if feedback and Mode.PARROT in modes:
            for recs in per_url:
                by_mode = {r.mode: r for r in recs}
                self.feedback(by_mode[Mode.PARROT], {m: r for m, r in by_mode.items() if m is not Mode.PARROT}, truth)
        return [r for recs in per_url for r in recs]

    # -- feedback ----------------------------------------------------------------

    def feedback(
        self,
        parrot: UrlVerdictRecord,
        baselines: Mapping[Mode, UrlVerdictRecord],
        truth: Mapping[str, str] | None = None,
    ) -> list[tuple[int, Label]]:
        """Store crawl results that carry a cloaking signal.

        Parrot Phishing while both baselines say NonPhishing stores Parrot's
        crawl as Success and the baselines' as Failed. Parrot NonPhishing on a
        URL known to be phishing stores Parrot's crawl as Failed.
        """
        inserts: list[tuple[UrlVerdictRecord, Label]] = []
        base = [baselines.get(Mode.STANDARD), baselines.get(Mode.TYPICAL)]
        if parrot.verdict is Verdict.PHISHING:
            if all(b is not None and b.verdict is Verdict.NON_PHISHING for b in base):
                inserts = [(parrot, Label.SUCCESS)] + [(b, Label.FAILED) for b in base]
        elif (truth or {}).get(parrot.url) == Verdict.PHISHING.value:
            inserts = [(parrot, Label.FAILED)]

        done: list[tuple[int, Label]] = []
        with self._feedback_lock:
            for rec, label in inserts:
                if rec.final is None:
                    continue
                key = (rec.url, rec.mode.value, rec.final.fetched_at.isoformat())
                if key in self._fed or rec.final.id in self.store:
                    continue
                self.store.insert(rec.final, label)
                self._fed.add(key)
                done.append((rec.final.id, label))
                if self.persist_store:
                    self.store.append_saved(self.cfg.records_path, self.cfg.vectors_path, rec.final.id)
        return done

    # -- output --------------------------------------------------------------------

    def write_run(self, records: Iterable[UrlVerdictRecord], out_dir: str | Path | None = None) -> Path:
        out = Path(out_dir or self.out_dir or ".")
        out.mkdir(parents=True, exist_ok=True)
        records = list(records)
        write_jsonl(out / "verdicts.jsonl", (r.to_dict() for r in records))
        crawls = []
        for r in records:
            crawls.extend(c.to_dict() for c in (r.preliminary, r.final) if c is not None)
        write_jsonl(out / "crawls.jsonl", crawls)
        return out


def load_verdicts(path) -> list[VerdictRow]:
    rows = []
    for line in Path(path).read_text("utf-8").splitlines():
        if line.strip():
            rows.append(VerdictRow.from_dict(json.loads(line)))
    return rows


# -- intake --------------------------------------------------------------------------

@dataclass
class IngestResult:
    kept: list[str] = field(default_factory=list)
    dropped: list[tuple[str, str]] = field(default_factory=list)


def read_url_lines(path) -> list[str]:
    text = Path(path).read_text("utf-8")
    return [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]


def read_allowlist(path) -> set[str]:
    """One domain per line; "rank,domain" CSV lines are accepted too."""
    out = set()
    for ln in read_url_lines(path):
        out.add(ln.split(",")[-1].strip().lower().rstrip("."))
    return out


def ingest(
    urls: Iterable[str],
    allowlist: Iterable[str] = (),
    resolver: Callable[[str], dict] | None = None,
    parking_patterns: Iterable[str] = (),
) -> IngestResult:
    """Filter candidate URLs; survivors keep input order, exact duplicates go."""
    allowed = {d.lower().rstrip(".") for d in allowlist}
    parking = [re.compile(p, re.IGNORECASE) for p in parking_patterns]
    result = IngestResult()
    seen: set[str] = set()
    for url in urls:
        url = url.strip()
        parts = urlsplit(url)
        if parts.scheme not in ("http", "https") or not parts.hostname:
            result.dropped.append((url, "invalid-url"))
            continue
        if url in seen:
            result.dropped.append((url, "duplicate"))
            continue
        seen.add(url)
        host = host_of(url)
        if host in allowed or registrable_domain(host) in allowed:
            result.dropped.append((url, "popular-domain"))
            continue
        if any(p.search(url) for p in parking):
            result.dropped.append((url, "parking"))
            continue
        if resolver is not None and not is_ip_literal(host):
            try:
                answer = resolver(host) or {}
            except Exception as exc:  # resolver trouble is not evidence of NXDOMAIN
                logger.warning("%s: resolver error %s; keeping", url, exc)
                answer = {}
            if answer.get("Status") == NXDOMAIN:
                result.dropped.append((url, "nxdomain"))
                continue
            targets = [str(a.get("data", "")) for a in answer.get("Answer") or []]
            if any(pat.search(t) for pat in parking for t in targets):
                result.dropped.append((url, "parking"))
                continue
        result.kept.append(url)
    return result
