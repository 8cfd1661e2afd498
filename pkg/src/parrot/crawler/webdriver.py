"""Browser fetch backend speaking the W3C WebDriver wire protocol.

Works against chromedriver, a Selenium grid, or anything exposing the same
endpoints. Network logs come from Chrome's performance log when the driver
offers it, otherwise from the navigation timing entry of the page.
"""

from __future__ import annotations

import base64
import json
import logging
import time
from urllib.parse import urlsplit, urlunsplit

import requests

from ..records import EnvironmentInfo, HtmlInfo, HttpRequest, HttpResponse, NetworkInfo, header_value
from .fetch import FetchResult, ProxyError, Timeouts
from .html import extract_html

logger = logging.getLogger(__name__)

_NAV_STATUS_JS = (
    "const n = performance.getEntriesByType('navigation')[0];"
    "return n ? {url: n.name, status: n.responseStatus || 0} : null;"
)


class WebDriverError(RuntimeError):
    pass


def _strip_credentials(proxy: str) -> str:
    parts = urlsplit(proxy)
    netloc = parts.hostname or ""
    if parts.port:
        netloc += f":{parts.port}"
    return urlunsplit((parts.scheme, netloc, "", "", ""))


def parse_performance_log(entries: list[dict]) -> NetworkInfo:
    """Turn Chrome ``performance`` log entries into request/response pairs."""
    reqs: list[HttpRequest] = []
    resps: list[HttpResponse] = []
    current: dict[str, int] = {}
    answered: set[int] = set()
    next_id = 1
    for entry in entries:
        try:
            msg = json.loads(entry["message"])["message"]
        except (KeyError, TypeError, ValueError):
            continue
        method = msg.get("method")
        params = msg.get("params", {})
        rid = params.get("requestId")
        if method == "Network.requestWillBeSent":
            redirect = params.get("redirectResponse")
            if redirect and rid in current and current[rid] not in answered:
                resps.append(HttpResponse(current[rid], int(redirect.get("status", 0)), redirect.get("url", ""),
                                          dict(redirect.get("headers", {}))))
                answered.add(current[rid])
            req = params.get("request", {})
            reqs.append(HttpRequest(next_id, req.get("method", "GET"), req.get("url", ""), dict(req.get("headers", {}))))
            current[rid] = next_id
            next_id += 1
        elif method == "Network.responseReceived" and rid in current and current[rid] not in answered:
            resp = params.get("response", {})
            status = int(resp.get("status", 0))
            if 100 <= status <= 599:
                resps.append(HttpResponse(current[rid], status, resp.get("url", ""), dict(resp.get("headers", {}))))
                answered.add(current[rid])
    return NetworkInfo(reqs, resps)


class WebDriverBackend:
    kind = "browser"

    def __init__(self, endpoint: str, timeouts: Timeouts | None = None, browser: str = "chrome", headless: bool = True):
        self.endpoint = endpoint.rstrip("/")
        self.timeouts = timeouts or Timeouts()
        self.browser = browser
        self.headless = headless
        self.http = requests.Session()
        self.http.trust_env = False

    def _call(self, method: str, path: str, body: dict | None = None):
        try:
            resp = self.http.request(
                method, self.endpoint + path, json=body,
                timeout=(self.timeouts.connect, self.timeouts.nav + self.timeouts.settle),
            )
        except requests.RequestException as exc:
            raise WebDriverError(f"{method} {path}: {exc}") from exc
        try:
            payload = resp.json()
        except ValueError:
            raise WebDriverError(f"{method} {path}: non-JSON reply ({resp.status_code})") from None
        value = payload.get("value") if isinstance(payload, dict) else None
        if resp.status_code >= 400 or (isinstance(value, dict) and "error" in value):
            err = value.get("error", resp.status_code) if isinstance(value, dict) else resp.status_code
            raise WebDriverError(f"{method} {path}: {err}")
        return value

    def capabilities(self, headers: dict[str, str], proxy: str | None, language: str) -> dict:
        args = [f"--user-agent={header_value(headers, 'User-Agent') or ''}", f"--lang={language or 'en-US'}"]
        if self.headless:
            args.append("--headless=new")
        caps = {
            "browserName": self.browser,
            "acceptInsecureCerts": True,
            "pageLoadStrategy": "normal",
            "timeouts": {"pageLoad": int(self.timeouts.nav * 1000), "script": 10000},
            "goog:loggingPrefs": {"performance": "ALL"},
            "goog:chromeOptions": {"args": args},
        }
        if proxy:
            # chromedriver cannot take proxy credentials on the command line
            if urlsplit(proxy).username:
                logger.warning("proxy credentials dropped for browser egress")
            caps["goog:chromeOptions"]["args"].append(f"--proxy-server={_strip_credentials(proxy)}")
        return {"capabilities": {"alwaysMatch": caps}}

    def fetch(self, url: str, headers: dict[str, str], proxy: str | None, environment: EnvironmentInfo) -> FetchResult:
        start = time.perf_counter()
        notes: list[str] = []
        try:
            created = self._call("POST", "/session", self.capabilities(headers, proxy, environment.language))
        except WebDriverError as exc:
            if proxy and "proxy" in str(exc).lower():
                raise ProxyError(str(exc)) from exc
            raise
        sid = created["sessionId"]
        base = f"/session/{sid}"
        error = None
        document = ""
        final_url = None
        screenshot = None
        network = NetworkInfo()
        try:
            extra = {k: v for k, v in headers.items() if k.lower() != "user-agent"}
            if extra:
                try:
                    self._call("POST", base + "/goog/cdp/execute", {"cmd": "Network.enable", "params": {}})
                    self._call("POST", base + "/goog/cdp/execute",
                               {"cmd": "Network.setExtraHTTPHeaders", "params": {"headers": extra}})
                except WebDriverError as exc:
                    notes.append(f"extra headers not applied: {exc}")
            try:
                self._call("POST", base + "/url", {"url": url})
            except WebDriverError as exc:
                if "proxy" in str(exc).lower():
                    raise ProxyError(str(exc)) from exc
                error = str(exc)
            if error is None:
                time.sleep(self.timeouts.settle)
                document = self._call("GET", base + "/source") or ""
                try:
                    screenshot = base64.b64decode(self._call("GET", base + "/screenshot") or "")
                except WebDriverError as exc:
                    notes.append(f"no screenshot: {exc}")
            network = self._network_log(base, url, headers, notes)
            if network.responses:
                final_url = network.final_response().url
        finally:
            try:
                self._call("DELETE", base)
            except WebDriverError as exc:
                logger.warning("failed to close session %s: %s", sid, exc)
        return FetchResult(
            network=network,
            html=extract_html(document) if document else HtmlInfo(),
            environment=environment,
            final_url=final_url,
            elapsed=time.perf_counter() - start,
            screenshot=screenshot,
            document=document,
            error=error,
            notes=notes,
        )

    def _network_log(self, base: str, url: str, headers: dict[str, str], notes: list[str]) -> NetworkInfo:
        try:
            entries = self._call("POST", base + "/se/log", {"type": "performance"})
            net = parse_performance_log(entries or [])
            if net.requests:
                return net
        except WebDriverError as exc:
            notes.append(f"performance log unavailable: {exc}")
        req = HttpRequest(1, "GET", url, dict(headers))
        try:
            nav = self._call("POST", base + "/execute/sync", {"script": _NAV_STATUS_JS, "args": []})
        except WebDriverError:
            nav = None
        if nav and 100 <= int(nav.get("status") or 0) <= 599:
            return NetworkInfo([req], [HttpResponse(1, int(nav["status"]), nav.get("url") or url, {})])
        return NetworkInfo([req], [])
