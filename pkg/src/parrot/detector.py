"""Phishing verdicts for fetched pages.

Two detectors: a marker-token stub for the simulator, and an adapter that
runs an external command on a result directory and reads a one-word verdict
from its stdout.
"""

from __future__ import annotations

import json
import logging
import subprocess
from enum import Enum
from pathlib import Path

from .cloaksim import MARKER_PREFIX
from .crawler.fetch import FetchResult

logger = logging.getLogger(__name__)


class Verdict(str, Enum):
    PHISHING = "Phishing"
    NON_PHISHING = "NonPhishing"


class DetectorError(RuntimeError):
    pass


def write_result_dir(path: Path, url: str, fetch: FetchResult) -> Path:
    """Dump a fetch for external tools: url.txt, page.html, network.json, screenshot.png."""
    path.mkdir(parents=True, exist_ok=True)
    (path / "url.txt").write_text(url + "\n", "utf-8")
    (path / "page.html").write_text(fetch.document or "", "utf-8")
    (path / "network.json").write_text(json.dumps(fetch.network.to_dict(), indent=1), "utf-8")
    if fetch.screenshot:
        (path / "screenshot.png").write_bytes(fetch.screenshot)
    return path


class MarkerDetector:
    name = "stub"

    def __init__(self, marker: str = MARKER_PREFIX):
        self.marker = marker

    def judge(self, url: str, fetch: FetchResult, result_dir: Path | None = None) -> Verdict:
        return Verdict.PHISHING if self.marker in (fetch.document or "") else Verdict.NON_PHISHING


class CommandDetector:
    """Runs ``argv + [result_dir]``; the first word of stdout is the verdict."""

    name = "command"

    def __init__(self, argv: list[str], timeout: float = 120.0, scratch: Path | None = None):
        if not argv:
            raise ValueError("detector command is empty")
        self.argv = list(argv)
        self.timeout = timeout
        self.scratch = scratch

    def judge(self, url: str, fetch: FetchResult, result_dir: Path | None = None) -> Verdict:
        if result_dir is None:
            import tempfile

            result_dir = Path(tempfile.mkdtemp(prefix="parrot-", dir=self.scratch))
        write_result_dir(result_dir, url, fetch)
        try:
            proc = subprocess.run(
                self.argv + [str(result_dir)], capture_output=True, text=True, timeout=self.timeout, check=False
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise DetectorError(f"detector failed to run: {exc}") from exc
        words = proc.stdout.split()
        if proc.returncode != 0 or not words:
            raise DetectorError(f"detector exit {proc.returncode}: {proc.stderr.strip()[:200]}")
        word = words[0].strip().lower()
        if word in ("phishing", "malicious", "1", "true"):
            return Verdict.PHISHING
        if word in ("nonphishing", "non-phishing", "benign", "0", "false"):
            return Verdict.NON_PHISHING
        raise DetectorError(f"unrecognized detector output {words[0]!r}")


def make_detector(setting: str | list[str]):
    if setting == "stub":
        return MarkerDetector()
    if isinstance(setting, str):
        import shlex

        setting = shlex.split(setting)
    return CommandDetector(setting)
