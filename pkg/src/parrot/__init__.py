"""Cloaking-aware phishing crawler that picks a crawl environment per URL."""

__version__ = "0.1.0"
