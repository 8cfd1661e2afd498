"""Fetch backends and the fetch result type."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from urllib.parse import urljoin

import requests
from requests.adapters import HTTPAdapter

from ..records import EnvironmentInfo, HtmlInfo, HttpRequest, HttpResponse, NetworkInfo
from .html import extract_html

logger = logging.getLogger(__name__)

REDIRECT_CAP = 15
_PRIVATE_HEADERS = {"authorization", "proxy-authorization"}


class ProxyError(RuntimeError):
    """The egress proxy could not be reached (infrastructure, not cloaking)."""


@dataclass
class Timeouts:
    connect: float = 10.0
    nav: float = 30.0
    settle: float = 5.0

    def __post_init__(self):
        if min(self.connect, self.nav, self.settle) <= 0:
            raise ValueError("timeouts must be > 0")


@dataclass
class FetchResult:
    network: NetworkInfo
    html: HtmlInfo
    environment: EnvironmentInfo
    final_url: str | None = None
    elapsed: float = 0.0
    screenshot: bytes | None = None
    document: str = ""
    error: str | None = None
    notes: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.elapsed < 0:
            raise ValueError("elapsed must be >= 0")


def _public_headers(headers) -> dict[str, str]:
    return {k: v for k, v in headers.items() if k.lower() not in _PRIVATE_HEADERS}


class PlainHttpBackend:
    """Redirect-following HTTP client; no script execution.

    Every fetch uses a fresh cookie jar so nothing carries over between URLs;
    connection pools are shared.
    """

    kind = "plain"

    def __init__(self, timeouts: Timeouts | None = None, redirect_cap: int = REDIRECT_CAP, verify_tls: bool = False):
        self.timeouts = timeouts or Timeouts()
        self.redirect_cap = redirect_cap
        self.verify_tls = verify_tls
        self._adapter = HTTPAdapter(pool_connections=16, pool_maxsize=16)

    def _session(self, proxy: str | None) -> requests.Session:
        s = requests.Session()
        s.trust_env = False
        s.headers.clear()
        s.verify = self.verify_tls
        s.mount("http://", self._adapter)
        s.mount("https://", self._adapter)
        s.proxies = {"http": proxy, "https": proxy} if proxy else {}
        return s

    def fetch(self, url: str, headers: dict[str, str], proxy: str | None, environment: EnvironmentInfo) -> FetchResult:
        start = time.perf_counter()
        session = self._session(proxy)
        reqs: list[HttpRequest] = []
        resps: list[HttpResponse] = []
        final = None
        error = None
        current = url
        try:
            for hop in range(1, self.redirect_cap + 2):
                prep = session.prepare_request(requests.Request("GET", current, headers=headers))
                reqs.append(HttpRequest(hop, "GET", prep.url, _public_headers(prep.headers)))
                try:
                    resp = session.send(
                        prep, allow_redirects=False, timeout=(self.timeouts.connect, self.timeouts.nav)
                    )
                except requests.exceptions.ProxyError as exc:
                    raise ProxyError(f"proxy unreachable for {current}: {exc}") from exc
                except requests.RequestException as exc:
                    error = f"{type(exc).__name__}: {exc}"
                    break
                resps.append(HttpResponse(hop, resp.status_code, resp.url, dict(resp.headers)))
                if resp.is_redirect and "location" in resp.headers:
                    if hop > self.redirect_cap:
                        error = f"redirect cap {self.redirect_cap} reached"
                        break
                    current = urljoin(current, resp.headers["location"])
                    continue
                final = resp
                break
        finally:
            session.close()

        html = HtmlInfo()
        document = ""
        if final is not None:
            document = final.text
            html = extract_html(document, final.headers.get("content-type", ""))
        return FetchResult(
            network=NetworkInfo(reqs, resps),
            html=html,
            environment=environment,
            final_url=resps[-1].url if resps else None,
            elapsed=time.perf_counter() - start,
            document=document,
            error=error,
        )
