"""Visible-text and tag-structure extraction from an HTML document."""

from __future__ import annotations

import re
from html.parser import HTMLParser

from ..records import HtmlInfo, collapse_ws

HIDDEN = frozenset({"script", "style", "noscript", "template", "head", "title"})
VOID = frozenset({
    "area", "base", "br", "col", "embed", "hr", "img", "input", "link",
    "meta", "param", "source", "track", "wbr",
})
INLINE = frozenset({
    "a", "abbr", "b", "bdi", "bdo", "cite", "code", "data", "dfn", "em", "font", "i", "kbd",
    "mark", "q", "s", "samp", "small", "span", "strong", "sub", "sup", "time", "u", "var",
})
SELF_CLOSING_SIBLINGS = frozenset({"li", "p", "option", "tr", "td", "th", "dt", "dd"})
_TAG_NAME = re.compile(r"^[a-z][a-z0-9-]*$")


class _Extractor(HTMLParser):
    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.stack: list[str] = []
        self.parts: list[str] = []
        self.text: list[str] = []

    def handle_starttag(self, tag, attrs):
        if not _TAG_NAME.match(tag):
            return
        if tag in SELF_CLOSING_SIBLINGS and self.stack and self.stack[-1] == tag:
            self.handle_endtag(tag)
        self.parts.append(f"<{tag}>")
        if tag not in INLINE:
            self.text.append(" ")
        if tag in VOID:
            self.parts.append(f"</{tag}>")
        else:
            self.stack.append(tag)

    def handle_startendtag(self, tag, attrs):
        if not _TAG_NAME.match(tag):
            return
        self.parts.append(f"<{tag}></{tag}>")
        if tag not in INLINE:
            self.text.append(" ")

    def handle_endtag(self, tag):
        if tag not in self.stack:
            return
        # close implicitly-open children first
        while self.stack:
            top = self.stack.pop()
            self.parts.append(f"</{top}>")
            if top not in INLINE:
                self.text.append(" ")
            if top == tag:
                break

    def handle_data(self, data):
        if not any(t in HIDDEN for t in self.stack):
            self.text.append(data)

    def finish(self) -> HtmlInfo:
        self.close()
        while self.stack:
            self.parts.append(f"</{self.stack.pop()}>")
        return HtmlInfo(collapse_ws("".join(self.text)), "".join(self.parts))


def extract_html(document: str, content_type: str = "text/html") -> HtmlInfo:
    """Extract rendered text and the attribute-free tag skeleton.

    Non-HTML bodies keep their collapsed text and an empty structure.
    """
    if not document:
        return HtmlInfo()
    if content_type and "html" not in content_type.lower() and "<html" not in document[:512].lower():
        return HtmlInfo(collapse_ws(document), "")
    parser = _Extractor()
    parser.feed(document)
    return parser.finish()
