"""Run configuration, loaded from a JSON file.

API keys are never read from the file; configs only name the environment
variable that holds them.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path

from .advisor import LlmConfig
from .crawler.fetch import Timeouts
from .embedding import EmbedderConfig
from .retrieval import RetrievalParams


class Mode(str, Enum):
    PARROT = "Parrot"
    STANDARD = "Standard"
    TYPICAL = "TypicalUser"

    @classmethod
    def parse(cls, text: str) -> "Mode":
        key = text.strip().lower()
        for m in cls:
            if key in (m.value.lower(), m.name.lower()):
                return m
        raise ValueError(f"unknown mode {text!r}")


@dataclass
class RunConfig:
    mode: Mode = Mode.PARROT
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    llm: LlmConfig = field(default_factory=LlmConfig)
    retrieval: RetrievalParams = field(default_factory=RetrievalParams)
    timeouts: Timeouts = field(default_factory=Timeouts)
    catalog_path: str | None = None
    proxies_path: str | None = None
    records_path: str | None = "store/records.jsonl"
    vectors_path: str | None = "store/vectors.jsonl"
    detector: str | list[str] = "stub"  # "stub" or an argv list
    seed: int = 42
    concurrency: int = 4
    fetch_backend: str = "plain"  # "plain" | "browser"
    webdriver_endpoint: str | None = None
    collectors: str = "live"  # "live" | "offline"
    feedback: bool = True

    def __post_init__(self):
        self.mode = Mode.parse(self.mode) if isinstance(self.mode, str) else Mode(self.mode)
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        if self.collectors not in ("live", "offline"):
            raise ValueError("collectors must be 'live' or 'offline'")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        nested = {"embedder": EmbedderConfig, "llm": LlmConfig, "retrieval": RetrievalParams, "timeouts": Timeouts}
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                if "api_key" in d[key]:
                    raise ValueError(f"{key}: put API keys in the environment, not the config file")
                d[key] = typ(**d[key])
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text("utf-8")))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d
