"""Crawl-record data model, canonical text renderings and JSON-lines storage."""

from __future__ import annotations

import json
import logging
import re
import threading
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator

logger = logging.getLogger(__name__)

PROMPT_VIEW_CAP = 4000
TRUNCATION_MARKER = " ...[truncated]"

_WS = re.compile(r"\s+")
_TAG_STRUCTURE_CHARS = re.compile(r"^[<>/a-z0-9-]*$")


class Label(str, Enum):
    SUCCESS = "Success"
    FAILED = "Failed"
    UNLABELED = "Unlabeled"


class Category(str, Enum):
    DOMAIN = "Domain"
    NETWORK = "Network"
    HTML = "Html"
    FULL = "Full"


SEARCH_CATEGORIES = (Category.DOMAIN, Category.NETWORK, Category.HTML)


class RecordError(ValueError):
    """A record violates one of its invariants."""


class RecordFileError(ValueError):
    """A record file line could not be decoded."""

    def __init__(self, path, lineno: int, reason: str):
        super().__init__(f"{path}: line {lineno}: {reason}")
        self.path = path
        self.lineno = lineno


def collapse_ws(text: str) -> str:
    return _WS.sub(" ", text).strip()


@dataclass
class DomainInfo:
    domain_name: str
    registration: dict[str, Any] = field(default_factory=dict)
    # {"Status": int, "Answer": [{"name", "type", "TTL", "data"}, ...]}
    dns: dict[str, Any] = field(default_factory=dict)
    tls: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        name = (self.domain_name or "").strip().rstrip(".").lower()
        if not name or "/" in name or ":" in name and not _looks_ipv6(name):
            raise RecordError(f"invalid domain_name {self.domain_name!r}")
        self.domain_name = name
        for answer in self.dns.get("Answer", []) or []:
            if int(answer.get("TTL", 0)) < 0:
                raise RecordError(f"negative TTL in DNS answer {answer!r}")

    @property
    def answers(self) -> list[dict[str, Any]]:
        return list(self.dns.get("Answer", []) or [])

    def to_dict(self) -> dict[str, Any]:
        return {
            "domain_name": self.domain_name,
            "registration": self.registration,
            "dns": self.dns,
            "tls": self.tls,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DomainInfo":
        return cls(d["domain_name"], d.get("registration") or {}, d.get("dns") or {}, d.get("tls") or {})


def _looks_ipv6(name: str) -> bool:
    return bool(re.fullmatch(r"[0-9a-f:.]+", name)) and name.count(":") >= 2


@dataclass
class HttpRequest:
    id: int
    method: str
    url: str
    headers: dict[str, str] = field(default_factory=dict)

    def to_dict(self):
        return {"id": self.id, "method": self.method, "url": self.url, "headers": dict(self.headers)}


@dataclass
class HttpResponse:
    id: int
    status: int
    url: str
    headers: dict[str, str] = field(default_factory=dict)

    def to_dict(self):
        return {"id": self.id, "status": self.status, "url": self.url, "headers": dict(self.headers)}


@dataclass
class NetworkInfo:
    requests: list[HttpRequest] = field(default_factory=list)
    responses: list[HttpResponse] = field(default_factory=list)

    def __post_init__(self):
        req_ids = [r.id for r in self.requests]
        resp_ids = [r.id for r in self.responses]
        if len(set(req_ids)) != len(req_ids):
            raise RecordError("duplicate request id")
        if len(set(resp_ids)) != len(resp_ids):
            raise RecordError("duplicate response id")
        missing = set(resp_ids) - set(req_ids)
        if missing:
            raise RecordError(f"responses without request: {sorted(missing)}")
        for r in self.responses:
            if not 100 <= int(r.status) <= 599:
                raise RecordError(f"status {r.status} out of range")

    def first_request(self) -> HttpRequest | None:
        return min(self.requests, key=lambda r: r.id, default=None)

    def final_response(self) -> HttpResponse | None:
        return max(self.responses, key=lambda r: r.id, default=None)

    def to_dict(self):
        return {
            "requests": [r.to_dict() for r in self.requests],
            "responses": [r.to_dict() for r in self.responses],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "NetworkInfo":
        return cls(
            [HttpRequest(int(r["id"]), r["method"], r["url"], dict(r.get("headers") or {})) for r in d.get("requests", [])],
            [HttpResponse(int(r["id"]), int(r["status"]), r["url"], dict(r.get("headers") or {})) for r in d.get("responses", [])],
        )


@dataclass
class HtmlInfo:
    visible_text: str = ""
    tag_structure: str = ""

    def __post_init__(self):
        if not _TAG_STRUCTURE_CHARS.match(self.tag_structure):
            raise RecordError("tag_structure contains characters outside <>/a-z0-9-")

    def to_dict(self):
        return {"visible_text": self.visible_text, "tag_structure": self.tag_structure}

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("visible_text", ""), d.get("tag_structure", ""))


@dataclass
class EnvironmentInfo:
    ip_geolocation: dict[str, str]
    asn: dict[str, str] = field(default_factory=dict)
    language: str = ""

    def __post_init__(self):
        if not (self.ip_geolocation or {}).get("country"):
            raise RecordError("environment country is empty")

    @property
    def country(self) -> str:
        return self.ip_geolocation["country"]

    def to_dict(self):
        return {"ip_geolocation": dict(self.ip_geolocation), "asn": dict(self.asn), "language": self.language}

    @classmethod
    def from_dict(cls, d):
        return cls(dict(d["ip_geolocation"]), dict(d.get("asn") or {}), d.get("language", ""))


@dataclass
class CrawlRecord:
    id: int
    url: str
    fetched_at: datetime
    domain: DomainInfo
    network: NetworkInfo
    html: HtmlInfo
    environment: EnvironmentInfo
    label: Label = Label.UNLABELED

    def __post_init__(self):
        self.label = Label(self.label)
        if self.fetched_at.tzinfo is None:
            self.fetched_at = self.fetched_at.replace(tzinfo=timezone.utc)

    def labeled(self, label: Label | str) -> "CrawlRecord":
        """Return a copy carrying ``label``; only Unlabeled records may be labeled."""
        label = Label(label)
        if label is Label.UNLABELED:
            raise RecordError("cannot label a record as Unlabeled")
        if self.label is not Label.UNLABELED and self.label is not label:
            raise RecordError(f"record {self.id} already labeled {self.label.value}")
        return replace(self, label=label)

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "url": self.url,
            "fetched_at": self.fetched_at.isoformat(),
            "label": self.label.value,
            "domain": self.domain.to_dict(),
            "network": self.network.to_dict(),
            "html": self.html.to_dict(),
            "environment": self.environment.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CrawlRecord":
        return cls(
            id=int(d["id"]),
            url=d["url"],
            fetched_at=datetime.fromisoformat(d["fetched_at"]),
            domain=DomainInfo.from_dict(d["domain"]),
            network=NetworkInfo.from_dict(d["network"]),
            html=HtmlInfo.from_dict(d["html"]),
            environment=EnvironmentInfo.from_dict(d["environment"]),
            label=Label(d.get("label", "Unlabeled")),
        )


@dataclass
class UserProfile:
    http_header: dict[str, str]
    ip_location: str
    network_provider: str

    def __post_init__(self):
        ua = header_value(self.http_header, "User-Agent")
        if not ua or not ua.strip():
            raise RecordError("User-Agent header missing or empty")

    @property
    def user_agent(self) -> str:
        return header_value(self.http_header, "User-Agent") or ""


def header_value(headers: dict[str, str], name: str) -> str | None:
    lname = name.lower()
    for k, v in headers.items():
        if k.lower() == lname:
            return v
    return None


class RecordIds:
    """Thread-safe monotonically increasing id allocator."""

    def __init__(self, start: int = 1):
        self._next = start
        self._lock = threading.Lock()

    def next(self) -> int:
        with self._lock:
            value = self._next
            self._next += 1
            return value

    def observe(self, used: int) -> None:
        with self._lock:
            self._next = max(self._next, used + 1)


# -- canonical text ---------------------------------------------------------

def _normalize(value):
    if isinstance(value, str):
        return collapse_ws(value)
    if isinstance(value, dict):
        return {str(k): _normalize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_normalize(v) for v in value]
    return value


def _render(obj: dict[str, Any]) -> str:
    if not any(v not in ("", None, [], {}) for v in obj.values()):
        return "{}"
    return json.dumps(_normalize(obj), sort_keys=True, separators=(",", ":"), ensure_ascii=False, default=str)


def canonical_text(record: CrawlRecord, category: Category | str) -> str:
    category = Category(category)
    if category is Category.DOMAIN:
        return _render(record.domain.to_dict())
    if category is Category.NETWORK:
        return _render(record.network.to_dict())
    if category is Category.HTML:
        return _render(record.html.to_dict())
    return "\n".join(canonical_text(record, c) for c in SEARCH_CATEGORIES)


def prompt_view(record: CrawlRecord, cap: int = PROMPT_VIEW_CAP) -> str:
    """Compact single-line view of a record for inclusion in the LLM prompt.

    Keeps the crawl environment, the registration map and the main
    communications (first request, final response). Environment comes first
    so truncation removes the least useful parts.
    """
    comms: dict[str, Any] = {}
    first = record.network.first_request()
    final = record.network.final_response()
    if first is not None:
        comms["request"] = first.to_dict()
    if final is not None:
        comms["response"] = final.to_dict()
    view = {
        "environment": record.environment.to_dict(),
        "registration": record.domain.registration,
        "main_communications": comms,
    }
    text = json.dumps(_normalize(view), separators=(",", ":"), ensure_ascii=False, default=str)
    if len(text) > cap:
        text = text[: max(0, cap - len(TRUNCATION_MARKER))] + TRUNCATION_MARKER
    return text


# -- JSON lines ---------------------------------------------------------------

class JsonLinesReader:
    """Iterate decoded objects of a JSON-lines file.

    A malformed line raises :class:`RecordFileError` naming the line, except a
    final line without a trailing newline, which is skipped and counted in
    ``partial_lines``.
    """

    def __init__(self, path, decode=lambda obj: obj):
        self.path = Path(path)
        self.decode = decode
        self.partial_lines = 0

    def __iter__(self) -> Iterator[Any]:
        with open(self.path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
        for lineno, raw in enumerate(lines, start=1):
            if not raw.strip():
                continue
            try:
                yield self.decode(json.loads(raw))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                if lineno == len(lines) and not raw.endswith("\n"):
                    self.partial_lines += 1
                    logger.warning("%s: skipped partial trailing line %d", self.path, lineno)
                    continue
                raise RecordFileError(self.path, lineno, str(exc)) from exc


def write_jsonl(path, objects: Iterable[dict[str, Any]], append: bool = False) -> int:
    n = 0
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for obj in objects:
            fh.write(json.dumps(obj, ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")
            n += 1
    return n


def persist(path, records: Iterable[CrawlRecord], append: bool = False) -> int:
    return write_jsonl(path, (r.to_dict() for r in records), append=append)


def load(path) -> JsonLinesReader:
    """Stream records from ``path``; inspect ``partial_lines`` after iterating."""
    return JsonLinesReader(path, CrawlRecord.from_dict)
