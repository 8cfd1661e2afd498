"""Evidence collection (preliminary access) and the final profiled access."""

from __future__ import annotations

from typing import Mapping

from ..catalog import Catalog, CatalogEntry, ProxyMap, layer_headers
from .domain import DomainCollectors, collect_domain_info, host_of, registrable_domain
from .fetch import FetchResult, PlainHttpBackend, ProxyError, Timeouts
from .html import extract_html
from .webdriver import WebDriverBackend

__all__ = [
    "DomainCollectors", "FetchResult", "PlainHttpBackend", "ProxyError", "Timeouts", "WebDriverBackend",
    "collect_domain_info", "extract_html", "host_of", "make_backend", "preliminary_access", "profiled_access",
    "registrable_domain",
]


def make_backend(kind: str = "plain", endpoint: str | None = None, timeouts: Timeouts | None = None):
    if kind == "plain":
        return PlainHttpBackend(timeouts)
    if kind == "browser":
        if not endpoint:
            raise ValueError("browser backend needs a WebDriver endpoint")
        return WebDriverBackend(endpoint, timeouts)
    raise ValueError(f"unknown fetch backend {kind!r}")


def preliminary_access(url: str, backend, catalog: Catalog, proxies: ProxyMap) -> FetchResult:
    """Unprofiled access from the Standard Analysis egress.

    A ProxyError is folded into the result as an error note, since this
    access only gathers evidence.
    """
    entry = catalog.standard
    try:
        return backend.fetch(url, entry.headers, proxies.for_entry(entry), catalog.environment(entry))
    except ProxyError as exc:
        from ..records import HtmlInfo, NetworkInfo

        return FetchResult(NetworkInfo(), HtmlInfo(), catalog.environment(entry), error=f"ProxyError: {exc}")


def profiled_access(
    url: str,
    entry: CatalogEntry,
    extra_headers: Mapping[str, str] | None,
    backend,
    catalog: Catalog,
    proxies: ProxyMap,
) -> FetchResult:
    """Access through ``entry``'s headers and egress; raises ProxyError."""
    headers = layer_headers(entry, extra_headers)
    return backend.fetch(url, headers, proxies.for_entry(entry), catalog.environment(entry))
