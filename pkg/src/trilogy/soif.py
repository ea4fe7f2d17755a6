"""Summary Object Interchange Format: record grammar, parser, serializer, gatherer.

Wire grammar::

    record     = "@" template-type " { " url LF attribute* "}" LF
    attribute  = name "{" decimal-byte-count "}:" TAB value-bytes LF

``value-bytes`` is exactly ``decimal-byte-count`` raw bytes, so values may
hold newlines, braces or any other byte.
"""

from __future__ import annotations

import html
import json
import re
import time
from dataclasses import dataclass, field
from html.parser import HTMLParser
from typing import Iterable, Optional

ABSTRACT_BYTES = 500
MEDIA_HINTS = ("text", "html", "bib")

_FORBIDDEN_NAME_CHARS = set("{}:")


class SoifError(ValueError):
    """Malformed SOIF input or an unserializable record."""


def valid_attribute_name(name: str) -> bool:
    return bool(name) and not any(ch.isspace() or ch in _FORBIDDEN_NAME_CHARS for ch in name)


@dataclass(frozen=True)
class SoifRecord:
    template_type: str
    url: str
    attributes: tuple[tuple[str, bytes], ...] = field(default_factory=tuple)

    def __post_init__(self):
        # accept any iterable of pairs, store a hashable tuple
        object.__setattr__(self, "attributes", tuple((n, bytes(v)) for n, v in self.attributes))

    def get(self, name: str, default: Optional[bytes] = None) -> Optional[bytes]:
        for n, v in self.attributes:
            if n == name:
                return v
        return default

    def text(self, name: str) -> str:
        return (self.get(name) or b"").decode("utf-8", errors="replace")

    def replace(self, name: str, value: bytes) -> "SoifRecord":
        attrs = list(self.attributes)
        for i, (n, _) in enumerate(attrs):
            if n == name:
                attrs[i] = (n, value)
                break
        else:
            attrs.append((name, value))
        return SoifRecord(self.template_type, self.url, tuple(attrs))

    def without(self, *names: str) -> "SoifRecord":
        return SoifRecord(self.template_type, self.url,
                          tuple((n, v) for n, v in self.attributes if n not in names))


def check_record(record: SoifRecord) -> None:
    tt = record.template_type
    if not tt or any(ch.isspace() or ch in "{}" for ch in tt):
        raise SoifError(f"invalid template type {tt!r}")
    if not record.url or "\n" in record.url or record.url != record.url.strip():
        raise SoifError(f"invalid url {record.url!r}")
    for name, _ in record.attributes:
        if not valid_attribute_name(name):
            raise SoifError(f"invalid attribute name {name!r}")


def serialize(records: Iterable[SoifRecord]) -> bytes:
    out = bytearray()
    for rec in records:
        check_record(rec)
        out += b"@" + rec.template_type.encode() + b" { " + rec.url.encode() + b"\n"
        for name, value in rec.attributes:
            out += name.encode() + b"{" + str(len(value)).encode() + b"}:\t" + value + b"\n"
        out += b"}\n"
    return bytes(out)


_HEADER_RE = re.compile(rb"@([^\s{}]+) \{ ([^\n]+)\n")
_ATTR_RE = re.compile(rb"([^\s{}:]+)\{(\d{1,19})\}:\t")


def parse(data: bytes) -> list[SoifRecord]:
    """Parse zero or more concatenated records."""
    records = []
    pos = 0
    n = len(data)
    while True:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= n:
            return records
        m = _HEADER_RE.match(data, pos)
        if not m:
            raise SoifError(f"offset {pos}: header does not match '@TYPE {{ url'")
        try:
            template_type = m.group(1).decode()
            url = m.group(2).decode()
        except UnicodeDecodeError:
            raise SoifError(f"offset {pos}: header is not valid UTF-8") from None
        if url != url.strip():
            raise SoifError(f"offset {pos}: url has surrounding whitespace")
        pos = m.end()
        attrs = []
        while True:
            if pos >= n:
                raise SoifError(f"record {url!r}: missing closing '}}'")
            if data[pos:pos + 1] == b"}":
                if pos + 1 < n and data[pos + 1:pos + 2] != b"\n":
                    raise SoifError(f"offset {pos}: expected LF after closing '}}'")
                pos += 2
                break
            a = _ATTR_RE.match(data, pos)
            if not a:
                raise SoifError(f"offset {pos}: malformed attribute in record {url!r} (or missing closing '}}')")
            size = int(a.group(2))
            start = a.end()
            end = start + size
            if end >= n or data[end:end + 1] != b"\n":
                raise SoifError(
                    f"offset {pos}: attribute {a.group(1).decode(errors='replace')!r} declares {size} bytes, "
                    f"{max(0, n - start)} available before end of input or without terminating LF"
                )
            try:
                name = a.group(1).decode("utf-8")
            except UnicodeDecodeError:
                raise SoifError(f"offset {pos}: attribute name is not valid UTF-8") from None
            if not valid_attribute_name(name):
                raise SoifError(f"offset {pos}: invalid attribute name {name!r}")
            attrs.append((name, data[start:end]))
            pos = end + 1
        records.append(SoifRecord(template_type, url, tuple(attrs)))


# -- gatherer -----------------------------------------------------------------

class _HtmlSummary(HTMLParser):
    _SKIP = {"script", "style"}
    _HEADINGS = {"h1", "h2", "h3", "h4", "h5", "h6"}

    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.title: Optional[str] = None
        self.heading: Optional[str] = None
        self.keywords: Optional[str] = None
        self.body: list[str] = []
        self._stack: list[str] = []
        self._buf: list[str] = []

    def handle_starttag(self, tag, attrs):
        if tag == "meta":
            a = {k.lower(): (v or "") for k, v in attrs}
            if a.get("name", "").lower() == "keywords" and self.keywords is None:
                self.keywords = a.get("content", "")
            return
        if tag in ("title",) or tag in self._HEADINGS:
            self._buf = []
        self._stack.append(tag)

    def handle_endtag(self, tag):
        if tag not in self._stack:
            return
        while self._stack:
            top = self._stack.pop()
            if top == tag:
                break
        text = " ".join("".join(self._buf).split())
        if tag == "title" and self.title is None:
            self.title = text
        elif tag in self._HEADINGS and self.heading is None:
            self.heading = text

    def handle_data(self, data):
        if any(t in self._SKIP for t in self._stack):
            return
        self._buf.append(data)
        if "title" not in self._stack:
            self.body.append(data)


def truncate_utf8(text: str, limit: int) -> bytes:
    """Encode *text* and cut to at most *limit* bytes without splitting a character."""
    raw = text.encode("utf-8")
    if len(raw) <= limit:
        return raw
    cut = limit
    while cut > 0 and (raw[cut] & 0xC0) == 0x80:
        cut -= 1
    return raw[:cut]


def _collapse(text: str) -> str:
    return " ".join(text.split())


def gather(source: bytes, media_hint: str, url: str, now: Optional[float] = None) -> SoifRecord:
    """Summarise *source* into a SOIF record.

    ``media_hint`` is ``text``, ``html`` or ``bib`` (a JSON object with
    ``kind`` and ``fields``, as in the batch ingest format).
    """
    if not source:
        raise SoifError("empty source")
    if media_hint not in MEDIA_HINTS:
        raise SoifError(f"unknown media hint {media_hint!r} (expected one of {', '.join(MEDIA_HINTS)})")
    stamp = str(int(time.time() if now is None else now)).encode()
    size = str(len(source)).encode()

    if media_hint == "bib":
        from trilogy import ingest

        try:
            obj = json.loads(source.decode("utf-8"))
            record = ingest.to_soif(ingest.build_record(obj["kind"], obj["fields"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise SoifError(f"bad bib source: {exc}") from None
        if url:
            record = SoifRecord(record.template_type, url, record.attributes)
        for name in ("title", "keywords", "abstract"):
            if record.get(name) is None:
                record = record.replace(name, b"")
        abstract = record.get("abstract") or b""
        record = record.replace("abstract", truncate_utf8(abstract.decode("utf-8", "replace"), ABSTRACT_BYTES))
        return record.replace("gathered-time", stamp).replace("file-size", size)

    text = source.decode("utf-8", errors="replace")
    if media_hint == "html":
        parser = _HtmlSummary()
        parser.feed(text)
        parser.close()
        title = parser.title or parser.heading or ""
        keywords = _collapse(html.unescape(parser.keywords or ""))
        body = _collapse(" ".join(parser.body))
    else:
        title = next((line.strip() for line in text.splitlines() if line.strip()), "")
        keywords = ""
        body = _collapse(text)

    attrs = (
        ("title", title.encode("utf-8")),
        ("keywords", keywords.encode("utf-8")),
        ("abstract", truncate_utf8(body, ABSTRACT_BYTES)),
        ("gathered-time", stamp),
        ("file-size", size),
    )
    return SoifRecord("FILE", url, attrs)


def guess_media_hint(url: str, source: bytes) -> str:
    lower = url.lower()
    if lower.endswith((".html", ".htm")):
        return "html"
    if lower.endswith((".json", ".bib.json", ".jsonl")):
        return "bib"
    head = source[:512].lstrip().lower()
    if head.startswith((b"<!doctype html", b"<html")) or b"<title" in head:
        return "html"
    return "text"
