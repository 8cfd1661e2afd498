"""Concrete crawl environments and recommendation-to-environment matching."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

from .records import EnvironmentInfo, header_value

OS_BROWSERS = (
    ("Windows", "Edge"), ("Windows", "Chrome"), ("Windows", "Firefox"),
    ("macOS", "Edge"), ("macOS", "Chrome"), ("macOS", "Safari"), ("macOS", "Firefox"),
    ("Linux", "Edge"), ("Linux", "Chrome"), ("Linux", "Firefox"),
    ("Android", "Edge"), ("Android", "Chrome"), ("Android", "Firefox"),
    ("iOS", "Edge"), ("iOS", "Chrome"), ("iOS", "Safari"), ("iOS", "Firefox"),
)
LOCATIONS = (
    "United States", "India", "United Kingdom", "Germany", "Japan",
    "Brazil", "Saudi Arabia", "Canada", "Australia", "South Korea",
)
NETWORKS = ("Datacenter", "Residential", "Mobile")

DEFAULT_LOCATION = "United States"
DEFAULT_NETWORK = "Residential"

COUNTRY_ALIASES = {
    "United States": ["us", "usa", "u.s.", "u.s.a.", "united states", "united states of america", "america"],
    "India": ["in", "ind", "india", "bharat"],
    "United Kingdom": ["gb", "gbr", "uk", "u.k.", "united kingdom", "great britain", "britain", "england"],
    "Germany": ["de", "deu", "germany", "deutschland"],
    "Japan": ["jp", "jpn", "japan", "nippon", "nihon"],
    "Brazil": ["br", "bra", "brazil", "brasil"],
    "Saudi Arabia": ["sa", "sau", "ksa", "saudi arabia", "kingdom of saudi arabia", "saudi"],
    "Canada": ["ca", "can", "canada"],
    "Australia": ["au", "aus", "australia"],
    "South Korea": ["kr", "kor", "korea", "south korea", "republic of korea", "korea, republic of"],
}

NETWORK_SYNONYMS = (
    ("Mobile", ("mobile", "cellular", "carrier", "lte", "4g", "5g", "3g", "wireless", "smartphone")),
    ("Residential", ("residential", "isp", "home", "broadband", "consumer", "fixed", "cable", "dsl", "fiber", "fibre")),
    ("Datacenter", ("datacenter", "data center", "data-center", "cloud", "hosting", "vps", "server", "dc")),
)


class MatchQuality(str, Enum):
    EXACT = "Exact"
    PARTIAL = "Partial"
    FALLBACK = "Fallback"


@dataclass(frozen=True)
class CatalogEntry:
    os: str
    browser: str
    location: str
    network: str
    user_agent: str
    header_set: tuple[tuple[str, str], ...] = field(compare=False)
    proxy_ref: str = ""

    def __post_init__(self):
        if self.browser == "Safari" and self.os not in ("macOS", "iOS"):
            raise ValueError(f"Safari is not available on {self.os}")

    @property
    def key(self) -> tuple[str, str, str, str]:
        return (self.os, self.browser, self.location, self.network)

    @property
    def headers(self) -> dict[str, str]:
        return dict(self.header_set)

    def to_dict(self) -> dict[str, Any]:
        return {
            "os": self.os, "browser": self.browser, "location": self.location, "network": self.network,
            "user_agent": self.user_agent, "header_set": dict(self.header_set), "proxy_ref": self.proxy_ref,
        }

    @classmethod
    def from_dict(cls, d) -> "CatalogEntry":
        return cls(d["os"], d["browser"], d["location"], d["network"], d["user_agent"],
                   tuple(d.get("header_set", {}).items()), d.get("proxy_ref", ""))


def proxy_ref(location: str, network: str) -> str:
    return f"{location}/{network}"


def load_catalog_data(path=None) -> dict[str, Any]:
    if path is None:
        return json.loads(resources.files("parrot").joinpath("data/catalog.json").read_text("utf-8"))
    return json.loads(Path(path).read_text("utf-8"))


class Catalog:
    """The 17 x 10 x 3 environment grid plus the Standard Analysis entry."""

    def __init__(self, data: Mapping[str, Any] | None = None):
        self.data = dict(data or load_catalog_data())
        self.user_agents: dict[str, str] = self.data["user_agents"]
        self.locations: dict[str, dict] = self.data["locations"]
        self.networks: dict[str, dict] = self.data["networks"]
        missing = [f"{o}/{b}" for o, b in OS_BROWSERS if f"{o}/{b}" not in self.user_agents]
        if missing:
            raise ValueError(f"catalog data lacks user agents for {missing}")
        self._entries = [
            self._make(os_, br, loc, net, self.user_agents[f"{os_}/{br}"])
            for os_, br in OS_BROWSERS
            for loc in LOCATIONS
            for net in NETWORKS
        ]
        self._by_key = {e.key: e for e in self._entries}
        self.standard = self._make("Linux", "Chrome", "United States", "Datacenter", self.data["standard_user_agent"])

    @classmethod
    def from_file(cls, path) -> "Catalog":
        return cls(load_catalog_data(path))

    def _make(self, os_, browser, location, network, ua) -> CatalogEntry:
        headers = (
            ("User-Agent", ua),
            ("Accept", "text/html,application/xhtml+xml,application/xml;q=0.9,*/*;q=0.8"),
            ("Accept-Language", self.locations[location]["accept_language"]),
            ("Accept-Encoding", "gzip, deflate"),
            ("Upgrade-Insecure-Requests", "1"),
        )
        return CatalogEntry(os_, browser, location, network, ua, headers, proxy_ref(location, network))

    def enumerate(self) -> list[CatalogEntry]:
        return list(self._entries)

    def __len__(self):
        return len(self._entries)

    def get(self, os_, browser, location, network) -> CatalogEntry | None:
        return self._by_key.get((os_, browser, location, network))

    def environment(self, entry: CatalogEntry) -> EnvironmentInfo:
        loc = self.locations[entry.location]
        return EnvironmentInfo(
            {"country": loc["code"], "city": loc["city"], "region": loc["region"]},
            dict(self.networks[entry.network]),
            loc["language"],
        )

    def match(self, rec) -> tuple[CatalogEntry, MatchQuality]:
        """Map a recommendation onto the nearest catalog entry (total)."""
        ua = header_value(getattr(rec, "http_header", None) or {}, "User-Agent") or ""
        if ua == self.standard.user_agent and (
            normalize_country(getattr(rec, "ip_location", "") or ""),
            normalize_network(getattr(rec, "network_provider", "") or ""),
        ) == (self.standard.location, self.standard.network):
            return self.standard, MatchQuality.EXACT
        os_, browser = parse_user_agent(ua)
        if browser is None or (os_, browser) not in OS_BROWSERS:
            return self.standard, MatchQuality.FALLBACK
        location = normalize_country(getattr(rec, "ip_location", "") or "")
        network = normalize_network(getattr(rec, "network_provider", "") or "")
        quality = MatchQuality.EXACT if location and network else MatchQuality.PARTIAL
        entry = self._by_key[(os_, browser, location or DEFAULT_LOCATION, network or DEFAULT_NETWORK)]
        return entry, quality


def parse_user_agent(ua: str) -> tuple[str, str | None]:
    if "Windows NT" in ua:
        os_ = "Windows"
    elif "Android" in ua:
        os_ = "Android"
    elif "iPhone" in ua or "iPad" in ua:
        os_ = "iOS"
    elif "Mac OS X" in ua:
        os_ = "macOS"
    else:
        os_ = "Linux"
    if "Edg" in ua:
        browser = "Edge"
    elif "Chrome" in ua or "CriOS" in ua:
        browser = "Chrome"
    elif "Firefox" in ua or "FxiOS" in ua:
        browser = "Firefox"
    elif "Safari" in ua:
        browser = "Safari"
    else:
        browser = None
    return os_, browser


_ALIAS = {alias: name for name, aliases in COUNTRY_ALIASES.items() for alias in aliases}
_LONG_ALIASES = sorted((a for a in _ALIAS if len(a) >= 4), key=len, reverse=True)


def normalize_country(text: str) -> str | None:
    t = " ".join(text.strip().lower().replace("_", " ").split())
    if not t:
        return None
    if t in _ALIAS:
        return _ALIAS[t]
    for alias in _LONG_ALIASES:
        if re.search(rf"(?<![a-z]){re.escape(alias)}(?![a-z])", t):
            return _ALIAS[alias]
    return None


def normalize_network(text: str) -> str | None:
    t = text.strip().lower()
    if not t:
        return None
    for name, words in NETWORK_SYNONYMS:
        for w in words:
            if re.search(rf"(?<![a-z0-9]){re.escape(w)}(?![a-z0-9])", t):
                return name
    return None


def layer_headers(entry: CatalogEntry, extra: Mapping[str, str] | None) -> dict[str, str]:
    """Entry headers overlaid with ``extra``; User-Agent always follows the entry."""
    headers = entry.headers
    lower = {k.lower(): k for k in headers}
    for k, v in (extra or {}).items():
        if k.lower() == "user-agent" or v is None:
            continue
        if k.lower() in lower:
            headers[lower[k.lower()]] = str(v)
        else:
            headers[k] = str(v)
            lower[k.lower()] = k
    return headers


class ProxyMap:
    """(location, network) -> proxy URL or ``"direct"``."""

    def __init__(self, routes: Mapping[str, str], default: str | None = None):
        self.routes: dict[str, str] = {}
        for loc in LOCATIONS:
            for net in NETWORKS:
                ref = proxy_ref(loc, net)
                value = routes.get(ref, default)
                if value is None:
                    raise ValueError(f"proxy map has no entry for {ref}")
                self.routes[ref] = value
        unknown = set(routes) - set(self.routes)
        if unknown:
            raise ValueError(f"proxy map has unknown routes {sorted(unknown)}")

    @classmethod
    def direct(cls) -> "ProxyMap":
        return cls({}, default="direct")

    @classmethod
    def from_file(cls, path) -> "ProxyMap":
        d = json.loads(Path(path).read_text("utf-8"))
        return cls(d.get("routes", {}), d.get("default"))

    def to_dict(self):
        return {"routes": dict(self.routes)}

    def lookup(self, ref: str) -> str | None:
        """Proxy URL for ``ref``, or None for direct egress."""
        value = self.routes[ref]
        return None if value == "direct" else value

    def for_entry(self, entry: CatalogEntry) -> str | None:
        return self.lookup(entry.proxy_ref)
