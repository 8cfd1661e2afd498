"""Cloaked-site simulator for hermetic end-to-end runs.

The server answers ``/s/{scenario_id}`` with the phishing page when every
predicate of the scenario holds for the request, and with the scenario's
cloak response otherwise. It doubles as an HTTP proxy: a proxied request
(absolute URI) carries its synthetic egress as proxy credentials
``COUNTRY:Network``, which the shim turns into ``X-Sim-Geo`` /
``X-Sim-Network`` before evaluation. Direct requests may send those two
headers themselves.
"""

from __future__ import annotations

import base64
import html
import json
import logging
import random
import re
import threading
from dataclasses import asdict, dataclass, field
from datetime import date, timedelta
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Iterable, Sequence
from urllib.parse import urlsplit

from .catalog import LOCATIONS, NETWORKS, ProxyMap, load_catalog_data, proxy_ref
from .crawler.domain import DomainCollectors, NXDOMAIN

logger = logging.getLogger(__name__)

FIELDS = ("UserAgent", "AcceptLanguage", "GeoCountry", "NetworkType")
OPS = ("contains", "equals", "matches")
FAIL_MODES = ("decoy", "redirect", "forbidden")
MARKER_PREFIX = "SIM-PHISH-"


@dataclass(frozen=True)
class Predicate:
    field: str
    op: str
    value: str

    def __post_init__(self):
        if self.field not in FIELDS:
            raise ValueError(f"unknown predicate field {self.field!r}")
        if self.op not in OPS:
            raise ValueError(f"unknown predicate op {self.op!r}")

    def holds(self, observed: str) -> bool:
        if self.op == "contains":
            return self.value in observed
        if self.op == "equals":
            return observed == self.value
        return re.search(self.value, observed) is not None


@dataclass
class CloakScenario:
    id: str
    family: str
    predicates: list[Predicate]
    pass_content: str
    fail_mode: str = "decoy"
    fail_content: str = ""
    legit_url: str = ""
    host: str = ""
    domain_profile: dict = field(default_factory=dict)
    response_headers: dict = field(default_factory=dict)

    def __post_init__(self):
        self.predicates = [p if isinstance(p, Predicate) else Predicate(**p) for p in self.predicates]
        if not self.predicates:
            raise ValueError("a scenario needs at least one predicate")
        if self.fail_mode not in FAIL_MODES:
            raise ValueError(f"unknown fail mode {self.fail_mode!r}")
        if self.fail_mode == "redirect" and not self.legit_url:
            raise ValueError("redirect scenarios need a legit_url")
        if self.marker not in self.pass_content:
            raise ValueError("pass_content must carry the scenario marker")
        if MARKER_PREFIX in self.fail_content:
            raise ValueError("fail_content must not carry a marker")

    @property
    def marker(self) -> str:
        return f"{MARKER_PREFIX}{self.id}"

    @property
    def path(self) -> str:
        return f"/s/{self.id}"

    @property
    def url(self) -> str:
        return f"http://{self.host}{self.path}" if self.host else self.path

    def observed(self, headers, geo: str, network: str) -> dict[str, str]:
        def get(name):
            for k, v in headers.items():
                if k.lower() == name:
                    return v
            return ""

        return {
            "UserAgent": get("user-agent"),
            "AcceptLanguage": get("accept-language"),
            "GeoCountry": geo or "",
            "NetworkType": network or "",
        }

    def verdict(self, headers, geo: str, network: str) -> bool:
        """True when all predicates pass (conjunction)."""
        seen = self.observed(headers, geo, network)
        return all(p.holds(seen[p.field]) for p in self.predicates)

    def oracle(self) -> dict:
        return {"id": self.id, "family": self.family, "predicates": [asdict(p) for p in self.predicates]}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["predicates"] = [asdict(p) for p in self.predicates]
        return d

    @classmethod
    def from_dict(cls, d) -> "CloakScenario":
        return cls(**d)


def save_corpus(path, scenarios: Iterable[CloakScenario]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenarios:
            fh.write(json.dumps(s.to_dict(), ensure_ascii=False) + "\n")


def load_corpus(path) -> list[CloakScenario]:
    out = []
    for line in Path(path).read_text("utf-8").splitlines():
        if line.strip():
            out.append(CloakScenario.from_dict(json.loads(line)))
    return out


# -- corpus generation ----------------------------------------------------------

# Each family: predicate templates [(field, op, [(value, weight), ...])],
# cloak response, infrastructure fingerprint and page vocabulary.
FAMILIES = [
    {
        "slug": "sakura", "brand": "Sakura Direct Bank", "fail_mode": "redirect",
        "predicates": [
            ("GeoCountry", "equals", [("JP", 1.0)]),
            ("NetworkType", "equals", [("Residential", 0.85), ("Mobile", 0.15)]),
            ("UserAgent", "matches", [(r"Mozilla/5\.0", 0.5), (r"AppleWebKit|Gecko", 0.5)]),
        ],
        "registrar": "GMO Internet Group, Inc. d/b/a Onamae.com", "iana": "49",
        "ns": ["dns1.onamae.com", "dns2.onamae.com"], "issuer": ("Let's Encrypt", "R11"),
        "ip": "198.51.100", "tld": "top", "words": ["sakura", "direct", "bank", "login", "secure", "jp"],
        "server": "nginx/1.26.2", "powered": "PHP/7.4.33", "cdn": "static.sakura-assets.example",
        "campaign": date(2025, 1, 6),
    },
    {
        "slug": "kurobune", "brand": "Kurobune Mobile", "fail_mode": "decoy",
        "predicates": [
            ("UserAgent", "contains", [("Android", 0.6), ("Linux; Android", 0.3), ("Mobile", 0.1)]),
            ("GeoCountry", "equals", [("JP", 1.0)]),
        ],
        "registrar": "Gname.com Pte. Ltd.", "iana": "1923",
        "ns": ["ns1.dnsowl.com", "ns2.dnsowl.com", "ns3.dnsowl.com"], "issuer": ("Google Trust Services", "WE1"),
        "ip": "203.0.113", "tld": "cyou", "words": ["kurobune", "mobile", "point", "campaign", "my", "app"],
        "server": "cloudflare", "powered": "Express", "cdn": "cdn.kurobune-points.example",
        "campaign": date(2025, 1, 13),
    },
    {
        "slug": "shopridge", "brand": "ShopRidge", "fail_mode": "forbidden",
        "predicates": [
            ("UserAgent", "contains", [("Windows NT", 0.7), ("Win64", 0.3)]),
            ("GeoCountry", "equals", [("US", 1.0)]),
            ("NetworkType", "matches", [("Datacenter|Residential", 0.8), ("Residential", 0.2)]),
        ],
        "registrar": "NameSilo, LLC", "iana": "1479",
        "ns": ["ns1.dnsowl-us.example", "ns2.dnsowl-us.example"], "issuer": ("ZeroSSL", "ZeroSSL RSA Domain Secure Site CA"),
        "ip": "192.0.2", "tld": "shop", "words": ["shopridge", "account", "order", "verify", "center", "us"],
        "server": "Apache/2.4.58 (Ubuntu)", "powered": "PHP/8.1.2-1ubuntu2.14", "cdn": "assets.ridge-cdn.example",
        "campaign": date(2025, 1, 20),
    },
    {
        "slug": "pomme", "brand": "Pomme ID", "fail_mode": "decoy",
        "predicates": [
            ("UserAgent", "matches", [(r"Macintosh.*Version/[0-9.]+ Safari", 0.7), (r"Mac OS X.*Safari/605", 0.3)]),
            ("GeoCountry", "equals", [("JP", 1.0)]),
            ("NetworkType", "equals", [("Residential", 1.0)]),
        ],
        "registrar": "Alibaba Cloud Computing (Beijing) Co., Ltd.", "iana": "420",
        "ns": ["dns9.hichina.com", "dns10.hichina.com"], "issuer": ("Sectigo Limited", "Sectigo RSA Domain Validation Secure Server CA"),
        "ip": "100.64.12", "tld": "xyz", "words": ["pomme", "id", "support", "locked", "icloud", "restore"],
        "server": "LiteSpeed", "powered": "PHP/8.0.30", "cdn": "img.pomme-support.example",
        "campaign": date(2025, 1, 27),
    },
    {
        "slug": "parcelpoint", "brand": "ParcelPoint", "fail_mode": "redirect",
        "predicates": [
            ("NetworkType", "equals", [("Mobile", 1.0)]),
            ("GeoCountry", "equals", [("US", 0.85), ("CA", 0.15)]),
            ("UserAgent", "contains", [("Mobile", 1.0)]),
        ],
        "registrar": "Dynadot Inc", "iana": "472",
        "ns": ["ns1.dyna-ns.net", "ns2.dyna-ns.net"], "issuer": ("Let's Encrypt", "E6"),
        "ip": "100.70.44", "tld": "info", "words": ["parcelpoint", "delivery", "reschedule", "fee", "track", "usps"],
        "server": "openresty", "powered": "Next.js", "cdn": "media.parcelpoint-track.example",
        "campaign": date(2025, 2, 3),
    },
    {
        "slug": "paketnord", "brand": "Paketdienst Nord", "fail_mode": "forbidden",
        "predicates": [
            ("AcceptLanguage", "contains", [("de", 0.6), ("de-DE", 0.4)]),
            ("NetworkType", "equals", [("Residential", 0.8), ("Mobile", 0.2)]),
        ],
        "registrar": "Hostinger Operations, UAB", "iana": "1636",
        "ns": ["ns1.dns-parking.com", "ns2.dns-parking.com"], "issuer": ("DigiCert Inc", "Encryption Everywhere DV TLS CA - G2"),
        "ip": "100.80.9", "tld": "online", "words": ["paket", "nord", "zustellung", "sendung", "kunde", "de"],
        "server": "Microsoft-IIS/10.0", "powered": "ASP.NET", "cdn": "static.paketnord-kunde.example",
        "campaign": date(2025, 2, 10),
    },
    {
        "slug": "hangang", "brand": "Hangang Gov Portal", "fail_mode": "decoy",
        "predicates": [
            ("GeoCountry", "equals", [("KR", 1.0)]),
            ("UserAgent", "matches", [("iPhone|Android", 0.7), ("iPhone", 0.3)]),
        ],
        "registrar": "Gabia, Inc.", "iana": "244",
        "ns": ["ns.gabia.co.kr", "ns1.gabia.co.kr"], "issuer": ("Amazon", "Amazon RSA 2048 M02"),
        "ip": "100.90.77", "tld": "kr", "words": ["hangang", "gov", "portal", "refund", "tax", "notice"],
        "server": "AmazonS3", "powered": "Servlet/4.0", "cdn": "files.hangang-notice.example",
        "campaign": date(2025, 2, 17),
    },
    {
        "slug": "aurora", "brand": "Banco Aurora", "fail_mode": "redirect",
        "predicates": [
            ("GeoCountry", "equals", [("BR", 1.0)]),
            ("NetworkType", "matches", [("Residential|Mobile", 1.0)]),
            ("UserAgent", "contains", [("Windows", 0.8), ("Windows NT 10.0; Win64", 0.2)]),
        ],
        "registrar": "Registro.br", "iana": "9999",
        "ns": ["a.auto.dns.br", "b.auto.dns.br"], "issuer": ("GlobalSign nv-sa", "GlobalSign GCC R3 DV TLS CA 2020"),
        "ip": "100.99.3", "tld": "com.br", "words": ["aurora", "banco", "acesso", "seguro", "cliente", "pix"],
        "server": "Caddy", "powered": "Laravel", "cdn": "cdn.aurora-acesso.example",
        "campaign": date(2025, 2, 24),
    },
]

_GREETINGS = ["Welcome back", "Hello again", "Good day"]


def _choose(rng: random.Random, weighted):
    values, weights = zip(*weighted)
    return rng.choices(values, weights=weights, k=1)[0]


def _pass_page(kit: dict, scenario_id: str, greeting: str) -> str:
    brand = html.escape(kit["brand"])
    return (
        "<html><head><title>{b} - Sign in</title>"
        '<link rel="stylesheet" href="https://{cdn}/login.css"></head>'
        "<body><div class=\"wrap\"><h1>{b}</h1><h2>{g}, please verify your account</h2>"
        "<p>Unusual sign-in activity was detected on your {b} account. "
        "To keep using {b} services, confirm your identity within 24 hours.</p>"
        '<form method="post" action="/collect"><label>User ID</label><input name="u">'
        '<label>Password</label><input name="p" type="password">'
        "<label>Security code</label><input name=\"c\"><button>Continue</button></form>"
        "<p class=\"legal\">Copyright 2025 {b}. All rights reserved.</p>"
        "<span class=\"ref\">{m}</span></div></body></html>"
    ).format(b=brand, cdn=kit["cdn"], g=greeting, m=MARKER_PREFIX + scenario_id)


def _decoy_page(kit: dict) -> str:
    words = " ".join(w.capitalize() for w in kit["words"][:2])
    return (
        f"<html><head><title>{words} Garden Cafe</title></head><body><h1>{words} Garden Cafe</h1>"
        "<p>Fresh coffee and seasonal cakes. Open daily from 9am to 6pm.</p>"
        "<ul><li>Menu</li><li>Access</li><li>Contact</li></ul></body></html>"
    )


FORBIDDEN_PAGE = (
    "<html><head><title>403 Forbidden</title></head><body><h1>403 Forbidden</h1>"
    "<p>You do not have permission to access this resource.</p><hr><address>nginx/1.26.2</address></body></html>"
)


def legit_page(name: str) -> str:
    title = html.escape(name.replace("-", " ").title())
    return (
        f"<html><head><title>{title}</title></head><body><h1>{title}</h1>"
        "<p>Official site. Manage your services, read the latest news and find support.</p>"
        "<nav><a href=\"/help\">Help</a><a href=\"/news\">News</a></nav></body></html>"
    )


def generate_corpus(n_families: int, sites_per_family: int, seed: int) -> list[CloakScenario]:
    """Deterministic corpus; scenarios of one family share predicate structure."""
    if n_families < 1 or sites_per_family < 1:
        raise ValueError("need at least one family and one site per family")
    rng = random.Random(seed)
    out = []
    for f in range(n_families):
        kit = FAMILIES[f % len(FAMILIES)]
        family = kit["slug"] if f < len(FAMILIES) else f"{kit['slug']}{f // len(FAMILIES)}"
        for i in range(sites_per_family):
            sid = f"{family}-{i:03d}"
            preds = [Predicate(fld, op, _choose(rng, vals)) for fld, op, vals in kit["predicates"]]
            w = kit["words"]
            host = f"{rng.choice(w)}-{rng.choice(w)}-{rng.randrange(100, 999)}.{family}-{rng.choice(w)}.{kit['tld']}"
            created = kit["campaign"] + timedelta(days=rng.randrange(0, 6))
            ip = f"{kit['ip']}.{rng.randrange(2, 250)}"
            profile = {
                "registration": {
                    "domain_name": host.split(".", 1)[1].upper(),
                    "registrar": kit["registrar"],
                    "registrar_iana_id": kit["iana"],
                    "registration_date": created.isoformat() + "T00:00:00Z",
                    "expiration_date": created.replace(year=created.year + 1).isoformat() + "T00:00:00Z",
                    "name_servers": list(kit["ns"]),
                    "status": ["client transfer prohibited"],
                },
                "dns": {"Status": 0, "Answer": [{"name": host + ".", "type": 1, "TTL": 300, "data": ip}]},
                "tls": {
                    "issuer": {"O": kit["issuer"][0], "CN": kit["issuer"][1]},
                    "subject": {"CN": host},
                    "not_before": created.isoformat() + "T00:00:00",
                    "not_after": (created + timedelta(days=90)).isoformat() + "T00:00:00",
                },
            }
            headers = {
                "Server": kit["server"],
                "X-Powered-By": kit["powered"],
                "Content-Security-Policy": f"default-src 'self' {kit['cdn']}; img-src 'self' {kit['cdn']} data:",
                "Set-Cookie": f"{family}_sess={rng.randrange(10**7, 10**8)}; Path=/; HttpOnly",
            }
            out.append(CloakScenario(
                id=sid,
                family=family,
                predicates=preds,
                pass_content=_pass_page(kit, sid, rng.choice(_GREETINGS)),
                fail_mode=kit["fail_mode"],
                fail_content=FORBIDDEN_PAGE if kit["fail_mode"] == "forbidden" else _decoy_page(kit),
                legit_url=f"http://www.{kit['slug']}-official.example/brand/{kit['slug']}",
                host=host,
                domain_profile=profile,
                response_headers=headers,
            ))
    return out


# -- stub domain intelligence ------------------------------------------------------

class CorpusIntel:
    """WHOIS / DNS / TLS collectors answering from scenario domain profiles."""

    def __init__(self, scenarios: Iterable[CloakScenario]):
        self.by_host = {s.host: s.domain_profile for s in scenarios if s.host}
        self.by_domain = {}
        for host, prof in self.by_host.items():
            self.by_domain[host.split(".", 1)[1]] = prof

    def whois(self, domain: str) -> dict:
        prof = self.by_domain.get(domain)
        if prof is None:
            raise LookupError(f"no registration for {domain}")
        return json.loads(json.dumps(prof["registration"]))

    def dns(self, name: str) -> dict:
        prof = self.by_host.get(name)
        if prof is None:
            return {"Status": NXDOMAIN, "Answer": []}
        return json.loads(json.dumps(prof["dns"]))

    def tls(self, host: str, port: int = 443) -> dict:
        prof = self.by_host.get(host)
        if prof is None:
            raise ConnectionRefusedError(f"no TLS endpoint for {host}")
        return json.loads(json.dumps(prof["tls"]))

    def collectors(self) -> DomainCollectors:
        return DomainCollectors(whois=self.whois, dns=self.dns, tls=self.tls)


# -- server -------------------------------------------------------------------------

@dataclass
class SimLogEntry:
    scenario_id: str | None
    path: str
    headers: dict
    geo: str
    network: str
    verdict: str  # "Pass" | "Fail"


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    disable_nagle_algorithm = True
    server: "_SimHTTPServer"

    def log_message(self, fmt, *args):
        logger.debug("sim: " + fmt, *args)

    def send_response(self, code, message=None):
        self.send_response_only(code, message)

    def _reply(self, status: int, body: str, ctype: str = "text/html; charset=utf-8", headers=None):
        data = body.encode("utf-8")
        self.send_response(status)
        for k, v in (headers or {}).items():
            self.send_header(k, v)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _egress(self) -> tuple[str, dict, str, str]:
        headers = {k: v for k, v in self.headers.items()}
        target = self.path
        if target.startswith(("http://", "https://")):
            path = urlsplit(target).path or "/"
            geo = network = ""
            auth = self.headers.get("Proxy-Authorization", "")
            if auth.lower().startswith("basic "):
                try:
                    geo, _, network = base64.b64decode(auth[6:]).decode("utf-8").partition(":")
                except ValueError:
                    geo = network = ""
            headers = {k: v for k, v in headers.items() if k.lower() not in ("proxy-authorization", "x-sim-geo", "x-sim-network", "proxy-connection")}
            headers["X-Sim-Geo"] = geo
            headers["X-Sim-Network"] = network
        else:
            path = target
            geo = self.headers.get("X-Sim-Geo", "")
            network = self.headers.get("X-Sim-Network", "")
        return path, headers, geo, network

    def do_GET(self):
        srv = self.server
        path, headers, geo, network = self._egress()
        parts = [p for p in path.split("?")[0].split("/") if p]
        if len(parts) == 2 and parts[0] == "s":
            scenario = srv.scenarios.get(parts[1])
            if scenario is None:
                return self._reply(404, "<html><body><h1>404 Not Found</h1></body></html>")
            ok = scenario.verdict(headers, geo, network)
            srv.record(SimLogEntry(scenario.id, path, headers, geo, network, "Pass" if ok else "Fail"))
            if ok:
                return self._reply(200, scenario.pass_content, headers=scenario.response_headers)
            if scenario.fail_mode == "redirect":
                return self._reply(302, "", headers={**scenario.response_headers, "Location": scenario.legit_url})
            if scenario.fail_mode == "forbidden":
                return self._reply(403, scenario.fail_content, headers={"Server": "nginx/1.26.2"})
            return self._reply(200, scenario.fail_content, headers=scenario.response_headers)
        if len(parts) == 2 and parts[0] == "brand":
            return self._reply(200, legit_page(parts[1]), headers={"Server": "Apache"})
        if srv.expose_oracle and len(parts) == 2 and parts[0] == "oracle":
            scenario = srv.scenarios.get(parts[1])
            if scenario is None:
                return self._reply(404, "{}", "application/json")
            return self._reply(200, json.dumps(scenario.oracle()), "application/json")
        if srv.expose_oracle and parts == ["log"]:
            return self._reply(200, json.dumps([asdict(e) for e in srv.log_snapshot()]), "application/json")
        return self._reply(404, "<html><body><h1>404 Not Found</h1></body></html>")


class _SimHTTPServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, addr, scenarios, expose_oracle, keep_log):
        super().__init__(addr, _Handler)
        self.scenarios = {s.id: s for s in scenarios}
        self.expose_oracle = expose_oracle
        self.keep_log = keep_log
        self._log: list[SimLogEntry] = []
        self._log_lock = threading.Lock()

    def record(self, entry: SimLogEntry):
        if self.keep_log:
            with self._log_lock:
                self._log.append(entry)

    def log_snapshot(self) -> list[SimLogEntry]:
        with self._log_lock:
            return list(self._log)

    def clear_log(self):
        with self._log_lock:
            self._log.clear()


class SimServer:
    """Running simulator; use as a context manager or call :meth:`stop`."""

    def __init__(self, scenarios: Sequence[CloakScenario], port: int = 0, host: str = "127.0.0.1",
                 expose_oracle: bool = True, keep_log: bool = True):
        self.scenarios = list(scenarios)
        self._httpd = _SimHTTPServer((host, port), self.scenarios, expose_oracle, keep_log)
        self.host, self.port = self._httpd.server_address[:2]
        self._thread = threading.Thread(target=self._httpd.serve_forever, name="cloaksim", daemon=True)
        self._thread.start()

    @property
    def base_url(self) -> str:
        return f"http://{self.host}:{self.port}"

    @property
    def log(self) -> list[SimLogEntry]:
        return self._httpd.log_snapshot()

    def clear_log(self):
        self._httpd.clear_log()

    def proxy_url(self, country_code: str, network: str) -> str:
        return f"http://{country_code}:{network}@{self.host}:{self.port}"

    def proxy_map(self) -> ProxyMap:
        codes = {name: loc["code"] for name, loc in load_catalog_data()["locations"].items()}
        return ProxyMap({proxy_ref(loc, net): self.proxy_url(codes[loc], net) for loc in LOCATIONS for net in NETWORKS})

    def stop(self):
        self._httpd.shutdown()
        self._httpd.server_close()
        self._thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def serve(scenarios: Sequence[CloakScenario], port: int = 0, expose_oracle: bool = True) -> SimServer:
    return SimServer(scenarios, port=port, expose_oracle=expose_oracle)
