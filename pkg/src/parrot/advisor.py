"""Profile recommendation: prompt construction, LLM call and reply validation."""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Callable

import requests

from .records import header_value

logger = logging.getLogger(__name__)

EMPTY_EXAMPLES = "None available."
REPAIR_SUFFIX = "Return ONLY the JSON object."
REQUIRED_KEYS = ("http_header", "ip_location", "network_provider", "target_victim", "reason")

SUCCESS_HEADING = "1. Successful Crawling Example"
FAILED_HEADING = "2. Failed Crawling Example"


def _template(name: str) -> str:
    return resources.files("parrot").joinpath(f"data/{name}").read_text("utf-8").rstrip("\n")


SYSTEM_TEMPLATE = _template("prompt_system.txt")
USER_TEMPLATE = _template("prompt_user.txt")
_PLACEHOLDER = re.compile(r"\{(url|successful_examples|failed_examples)\}")


class AdviceUnavailable(RuntimeError):
    """No valid recommendation could be obtained."""

    def __init__(self, message: str, replies: list[str] | None = None):
        super().__init__(message)
        self.replies = replies or []


class LlmTransportError(RuntimeError):
    def __init__(self, message: str, retryable: bool = True):
        super().__init__(message)
        self.retryable = retryable


@dataclass(frozen=True)
class PromptBundle:
    system_text: str
    user_text: str

    def messages(self) -> list[dict[str, str]]:
        return [{"role": "system", "content": self.system_text}, {"role": "user", "content": self.user_text}]


@dataclass
class ProfileRecommendation:
    http_header: dict[str, str]
    ip_location: str
    network_provider: str
    target_victim: str
    reason: str

    @property
    def user_agent(self) -> str:
        return header_value(self.http_header, "User-Agent") or ""

    def to_dict(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in REQUIRED_KEYS}


@dataclass
class LlmConfig:
    endpoint: str = "https://api.openai.com/v1"
    model: str = "gpt-4o-mini"
    temperature: float = 0.0
    max_retries: int = 1
    api_key_env: str = "OPENAI_API_KEY"
    backend: str = "openai"  # "openai" | "mock"
    timeout: float = 60.0
    transport_retries: int = 2
    backoff: float = 1.0
    max_in_flight: int = 4

    def __post_init__(self):
        if self.max_retries < 0 or self.transport_retries < 0:
            raise ValueError("retries must be >= 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")


@dataclass
class ChatReply:
    content: str
    usage: dict[str, int] = field(default_factory=dict)


def _numbered(views: list[str]) -> str:
    if not views:
        return EMPTY_EXAMPLES
    return "\n".join(f"{i}. {v}" for i, v in enumerate(views, 1))


def build_prompt(url: str, successes: list[str], failures: list[str]) -> PromptBundle:
    values = {
        "url": url,
        "successful_examples": _numbered(list(successes)),
        "failed_examples": _numbered(list(failures)),
    }
    user = _PLACEHOLDER.sub(lambda m: values[m.group(1)], USER_TEMPLATE)
    return PromptBundle(SYSTEM_TEMPLATE, user)


def extract_json(text: str) -> dict | None:
    """First balanced ``{...}`` in ``text`` that decodes to a JSON object."""
    start = text.find("{")
    while start != -1:
        depth = 0
        in_str = False
        escaped = False
        for i in range(start, len(text)):
            ch = text[i]
            if in_str:
                if escaped:
                    escaped = False
                elif ch == "\\":
                    escaped = True
                elif ch == '"':
                    in_str = False
            elif ch == '"':
                in_str = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    try:
                        obj = json.loads(text[start : i + 1])
                    except ValueError:
                        break
                    if isinstance(obj, dict):
                        return obj
                    break
        start = text.find("{", start + 1)
    return None


def parse_recommendation(reply: str) -> ProfileRecommendation:
    """Validate a raw reply; raises ValueError describing the first problem."""
    obj = extract_json(reply)
    if obj is None:
        raise ValueError("no JSON object in reply")
    missing = [k for k in REQUIRED_KEYS if k not in obj]
    if missing:
        raise ValueError(f"missing keys: {', '.join(missing)}")
    headers = obj["http_header"]
    if not isinstance(headers, dict):
        raise ValueError("http_header is not an object")
    headers = {str(k): str(v) for k, v in headers.items() if v is not None}
    ua = header_value(headers, "User-Agent")
    if not ua or not ua.strip():
        raise ValueError("http_header lacks User-Agent")
    for key in REQUIRED_KEYS[1:]:
        if not isinstance(obj[key], str):
            raise ValueError(f"{key} is not a string")
    return ProfileRecommendation(headers, obj["ip_location"], obj["network_provider"], obj["target_victim"], obj["reason"])


def _complete(backend, bundle: PromptBundle) -> ChatReply:
    out = backend.complete(bundle) if hasattr(backend, "complete") else backend(bundle)
    return out if isinstance(out, ChatReply) else ChatReply(str(out))


def request_profile(bundle: PromptBundle, cfg: LlmConfig, backend, audit: list | None = None) -> ProfileRecommendation:
    """Query ``backend`` and validate its reply, with one repair attempt.

    ``backend`` is a callable taking a PromptBundle (or an object with a
    ``complete`` method) returning a string or ChatReply. Every raw reply is
    appended to ``audit``.
    """
    replies: list[str] = []
    current = bundle
    last_error = "no attempt made"
    for attempt in range(cfg.max_retries + 1):
        reply = None
        for t in range(cfg.transport_retries + 1):
            try:
                reply = _complete(backend, current)
                break
            except LlmTransportError as exc:
                last_error = f"transport: {exc}"
                if not exc.retryable or t == cfg.transport_retries:
                    raise AdviceUnavailable(last_error, replies) from exc
                time.sleep(cfg.backoff * (2**t))
        replies.append(reply.content)
        if audit is not None:
            audit.append({"attempt": attempt, "reply": reply.content, "usage": dict(reply.usage)})
        try:
            return parse_recommendation(reply.content)
        except ValueError as exc:
            last_error = str(exc)
            logger.info("unusable LLM reply (attempt %d): %s", attempt, exc)
        current = PromptBundle(bundle.system_text, bundle.user_text + "\n" + REPAIR_SUFFIX)
    raise AdviceUnavailable(f"no valid recommendation: {last_error}", replies)


class OpenAIChatBackend:
    """Chat completions over the OpenAI-compatible wire format."""

    def __init__(self, cfg: LlmConfig, session: requests.Session | None = None):
        self.cfg = cfg
        self.session = session or requests.Session()
        self._slots = threading.BoundedSemaphore(cfg.max_in_flight)

    def __repr__(self):
        return f"OpenAIChatBackend(endpoint={self.cfg.endpoint!r}, model={self.cfg.model!r})"

    def complete(self, bundle: PromptBundle) -> ChatReply:
        key = os.environ.get(self.cfg.api_key_env, "")
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        body = {"model": self.cfg.model, "messages": bundle.messages(), "temperature": self.cfg.temperature}
        with self._slots:
            try:
                resp = self.session.post(
                    self.cfg.endpoint.rstrip("/") + "/chat/completions", json=body, headers=headers, timeout=self.cfg.timeout
                )
            except requests.RequestException as exc:
                raise LlmTransportError(f"{type(exc).__name__}: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise LlmTransportError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise LlmTransportError(f"HTTP {resp.status_code}", retryable=False)
        try:
            payload = resp.json()
            content = payload["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise LlmTransportError(f"malformed completion: {exc}", retryable=False) from exc
        usage = {k: int(v) for k, v in (payload.get("usage") or {}).items() if isinstance(v, int)}
        return ChatReply(content or "", usage)


# -- deterministic stand-in ------------------------------------------------------

STANDARD_PROFILE = {
    "country": "United States",
    "network": "Datacenter",
    "user_agent": "Mozilla/5.0 (X11; Linux x86_64) AppleWebKit/537.36 (KHTML, like Gecko) "
    "HeadlessChrome/133.0.0.0 Safari/537.36",
}

_COUNTRY_NAMES = {
    "US": "United States", "IN": "India", "GB": "United Kingdom", "DE": "Germany", "JP": "Japan",
    "BR": "Brazil", "SA": "Saudi Arabia", "CA": "Canada", "AU": "Australia", "KR": "South Korea",
}
_RE_COUNTRY = re.compile(r'"country":"([^"]*)"')
_RE_NETWORK = re.compile(r'"type":"(Datacenter|Residential|Mobile)"')
_RE_UA = re.compile(r'"User-Agent":"((?:[^"\\]|\\.)*)"', re.IGNORECASE)


def _section(user_text: str, heading: str, stop: str | None) -> list[str]:
    lines = user_text.split("\n")
    out: list[str] = []
    inside = False
    for line in lines:
        if line.startswith(heading):
            inside = True
            continue
        if inside and (stop is None or line.startswith(stop) or line.startswith("Based on this information")):
            break
        if inside:
            out.append(line)
    return out


def _example_facts(line: str) -> tuple[str, str, str] | None:
    m = re.match(r"\d+\. (.*)$", line)
    if not m:
        return None
    body = m.group(1)
    try:
        view = json.loads(body)
        env = view.get("environment", {})
        country = env.get("ip_geolocation", {}).get("country", "")
        network = env.get("asn", {}).get("type", "")
        req = (view.get("main_communications") or {}).get("request") or {}
        ua = header_value(req.get("headers") or {}, "User-Agent") or ""
    except (ValueError, AttributeError):
        c, n, u = _RE_COUNTRY.search(body), _RE_NETWORK.search(body), _RE_UA.search(body)
        country, network = (c.group(1) if c else ""), (n.group(1) if n else "")
        ua = json.loads(f'"{u.group(1)}"') if u else ""
    if not country or not network:
        return None
    return _COUNTRY_NAMES.get(country, country), network, ua


def mock_llm(bundle: PromptBundle) -> str:
    """Majority (country, network) of the successful examples; UA of the first.

    Ties go to the lexicographically smaller pair. Without usable successes
    the Standard Analysis profile is returned.
    """
    facts = [f for f in map(_example_facts, _section(bundle.user_text, SUCCESS_HEADING, FAILED_HEADING)) if f]
    first_ua = next((ua for _, _, ua in facts if ua), "")
    if not facts or not first_ua:
        country, network, ua = STANDARD_PROFILE["country"], STANDARD_PROFILE["network"], STANDARD_PROFILE["user_agent"]
        reason = "no successful examples; using the default analysis profile"
    else:
        counts = Counter((c, n) for c, n, _ in facts)
        (country, network), _ = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        ua = first_ua
        reason = f"{counts[(country, network)]} of {len(facts)} successful examples used {country}/{network}"
    return json.dumps({
        "http_header": {"User-Agent": ua},
        "ip_location": country,
        "network_provider": network,
        "target_victim": f"users in {country}",
        "reason": reason,
    })


class MockChatBackend:
    def complete(self, bundle: PromptBundle) -> ChatReply:
        return ChatReply(mock_llm(bundle))


def make_backend(cfg: LlmConfig) -> Callable | Any:
    if cfg.backend == "mock":
        return MockChatBackend()
    if cfg.backend == "openai":
        return OpenAIChatBackend(cfg)
    raise ValueError(f"unknown LLM backend {cfg.backend!r}")
