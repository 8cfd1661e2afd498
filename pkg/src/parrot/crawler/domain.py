"""Domain evidence: registration (RDAP), DNS answers and the TLS certificate."""

from __future__ import annotations

import ipaddress
import logging
import socket
import ssl
from dataclasses import dataclass
from typing import Callable
from urllib.parse import urlsplit

import requests

from ..records import DomainInfo

logger = logging.getLogger(__name__)

# Second-level labels under which registrations happen one level deeper.
_SECOND_LEVEL = {
    "co", "com", "net", "org", "gov", "edu", "ac", "or", "ne", "go", "gr", "lg", "ad", "ed", "mil", "nic",
}

NXDOMAIN = 3


def host_of(url: str) -> str:
    host = urlsplit(url if "://" in url else f"http://{url}").hostname
    if not host:
        raise ValueError(f"URL has no host: {url!r}")
    return host.rstrip(".").lower()


def is_ip_literal(host: str) -> bool:
    try:
        ipaddress.ip_address(host)
        return True
    except ValueError:
        return False


def registrable_domain(host: str) -> str:
    """Approximate registrable domain (no public-suffix list)."""
    labels = host.rstrip(".").lower().split(".")
    if len(labels) <= 2 or is_ip_literal(host):
        return host.lower()
    if labels[-2] in _SECOND_LEVEL and len(labels[-1]) == 2:
        return ".".join(labels[-3:])
    return ".".join(labels[-2:])


class DohResolver:
    """DNS-over-HTTPS JSON resolver; answers come back in the stored format."""

    def __init__(self, endpoint: str = "https://dns.google/resolve", timeout: float = 5.0, session=None):
        self.endpoint = endpoint
        self.timeout = timeout
        self.session = session or requests.Session()

    def __call__(self, name: str, rtype: str = "A") -> dict:
        resp = self.session.get(self.endpoint, params={"name": name, "type": rtype}, timeout=self.timeout)
        resp.raise_for_status()
        body = resp.json()
        return {
            "Status": int(body.get("Status", 2)),
            "Answer": [
                {"name": a.get("name", ""), "type": a.get("type"), "TTL": int(a.get("TTL", 0)), "data": a.get("data", "")}
                for a in body.get("Answer", []) or []
            ],
        }


class SystemResolver:
    """getaddrinfo-based fallback; TTLs are unknown and reported as 0."""

    def __call__(self, name: str, rtype: str = "A") -> dict:
        try:
            infos = socket.getaddrinfo(name, None, proto=socket.IPPROTO_TCP)
        except socket.gaierror:
            return {"Status": NXDOMAIN, "Answer": []}
        seen = []
        for family, *_rest, sockaddr in infos:
            ip = sockaddr[0]
            if ip not in seen:
                seen.append(ip)
        return {
            "Status": 0,
            "Answer": [{"name": name, "type": 28 if ":" in ip else 1, "TTL": 0, "data": ip} for ip in seen],
        }


class RdapClient:
    def __init__(self, base: str = "https://rdap.org/domain/", timeout: float = 10.0, session=None):
        self.base = base
        self.timeout = timeout
        self.session = session or requests.Session()

    def __call__(self, domain: str) -> dict:
        resp = self.session.get(self.base + domain, timeout=self.timeout, headers={"Accept": "application/rdap+json"})
        resp.raise_for_status()
        return summarize_rdap(resp.json())


def summarize_rdap(body: dict) -> dict:
    out: dict = {"domain_name": str(body.get("ldhName", "")).upper()}
    for ev in body.get("events", []) or []:
        action = ev.get("eventAction", "")
        if action in ("registration", "expiration", "last changed"):
            out[f"{action.replace(' ', '_')}_date"] = ev.get("eventDate", "")
    for ent in body.get("entities", []) or []:
        if "registrar" in (ent.get("roles") or []):
            for item in (ent.get("vcardArray") or [None, []])[1]:
                if item and item[0] == "fn":
                    out["registrar"] = item[3]
    if body.get("status"):
        out["status"] = list(body["status"])
    ns = [n.get("ldhName", "").lower() for n in body.get("nameservers", []) or []]
    if ns:
        out["name_servers"] = ns
    return out


def tls_probe(host: str, port: int = 443, timeout: float = 5.0) -> dict:
    """Fetch the leaf certificate without verifying it and summarize it."""
    from cryptography import x509

    pem = ssl.get_server_certificate((host, port), timeout=timeout)
    cert = x509.load_pem_x509_certificate(pem.encode("ascii"))

    def names(name):
        return {attr.rfc4514_attribute_name: attr.value for attr in name}

    out = {
        "issuer": names(cert.issuer),
        "subject": names(cert.subject),
        "not_before": cert.not_valid_before_utc.isoformat(),
        "not_after": cert.not_valid_after_utc.isoformat(),
        "serial_number": format(cert.serial_number, "x"),
    }
    try:
        san = cert.extensions.get_extension_for_class(x509.SubjectAlternativeName)
        out["subject_alt_names"] = san.value.get_values_for_type(x509.DNSName)
    except x509.ExtensionNotFound:
        pass
    return out


@dataclass
class DomainCollectors:
    whois: Callable[[str], dict] | None = None
    dns: Callable[[str], dict] | None = None
    tls: Callable[[str, int], dict] | None = None

    @classmethod
    def live(cls) -> "DomainCollectors":
        return cls(whois=RdapClient(), dns=DohResolver(), tls=tls_probe)

    @classmethod
    def offline(cls) -> "DomainCollectors":
        return cls()


def collect_domain_info(url: str, collectors: DomainCollectors) -> tuple[DomainInfo, list[str]]:
    """Gather registration, DNS and TLS evidence for the URL's host.

    Each failing sub-collector leaves its map empty and adds a warning.
    Raises ValueError only when the URL has no host.
    """
    host = host_of(url)
    parts = urlsplit(url if "://" in url else f"http://{url}")
    warnings: list[str] = []
    registration: dict = {}
    dns: dict = {}
    tls: dict = {}

    if is_ip_literal(host):
        warnings.append("registration: IP literal has no registrable domain")
        warnings.append("dns: IP literal needs no resolution")
    else:
        if collectors.whois is None:
            warnings.append("registration: no collector configured")
        else:
            try:
                registration = dict(collectors.whois(registrable_domain(host)) or {})
            except Exception as exc:  # collectors are pluggable; any failure degrades
                warnings.append(f"registration: {type(exc).__name__}: {exc}")
        if collectors.dns is None:
            warnings.append("dns: no resolver configured")
        else:
            try:
                dns = dict(collectors.dns(host) or {})
            except Exception as exc:
                warnings.append(f"dns: {type(exc).__name__}: {exc}")

    if collectors.tls is None:
        warnings.append("tls: no probe configured")
    elif parts.scheme != "https":
        warnings.append("tls: not an https URL")
    else:
        try:
            tls = dict(collectors.tls(host, parts.port or 443) or {})
        except Exception as exc:
            warnings.append(f"tls: {type(exc).__name__}: {exc}")

    for w in warnings:
        logger.debug("%s: %s", host, w)
    return DomainInfo(host, registration, dns, tls), warnings
