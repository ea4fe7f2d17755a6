"""Typed bibliographic records and their conversion to SOIF for submission."""

from __future__ import annotations

import base64
import hashlib
import json
import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Iterator, NamedTuple, Union

from trilogy.soif import SoifRecord, serialize


class DocKind(str, Enum):
    conference_article = "conference_article"
    book = "book"
    book_chapter = "book_chapter"
    journal_article = "journal_article"
    thesis = "thesis"
    technical_report = "technical_report"


class FieldSpec(NamedTuple):
    name: str
    optional: bool = False

    def __str__(self):
        return self.name + ("?" if self.optional else "")


def _schema(spec: str) -> tuple[FieldSpec, ...]:
    return tuple(FieldSpec(f.rstrip("?"), f.endswith("?")) for f in spec.split())


SCHEMAS: dict[DocKind, tuple[FieldSpec, ...]] = {
    DocKind.conference_article: _schema("title authors conference year keywords abstract? url?"),
    DocKind.book: _schema("title authors publisher year isbn? keywords abstract? url?"),
    DocKind.book_chapter: _schema(
        "title authors chapter_title editors publisher year isbn? keywords abstract? url?"),
    DocKind.journal_article: _schema("title authors journal volume? year keywords abstract? url?"),
    DocKind.thesis: _schema("title author institution year degree keywords abstract? url?"),
    DocKind.technical_report: _schema(
        "title authors institution report_number? year keywords abstract? url?"),
}

_NAME_LISTS = ("authors", "editors")
_YEAR_RE = re.compile(r"\d{4}")


class RecordError(ValueError):
    """A bibliographic record failed validation."""


class SubmitError(Exception):
    """Submission to a broker failed; ``reason`` is the broker's text when it answered."""

    def __init__(self, reason: str, network: bool = False):
        super().__init__(reason)
        self.reason = reason
        self.network = network


def as_kind(kind: Union[str, DocKind]) -> DocKind:
    if isinstance(kind, DocKind):
        return kind
    try:
        return DocKind(str(kind).strip().lower().replace("-", "_").replace(" ", "_"))
    except ValueError:
        raise RecordError(
            f"unknown document kind {kind!r} (expected one of {', '.join(k.value for k in DocKind)})"
        ) from None


def required_fields(kind: Union[str, DocKind]) -> list[FieldSpec]:
    """Field schema for *kind* in prompting order; optional fields are flagged."""
    return list(SCHEMAS[as_kind(kind)])


def split_names(value: str) -> list[str]:
    return [part.strip() for part in value.split(";") if part.strip()]


@dataclass(frozen=True)
class BibRecord:
    kind: DocKind
    fields: dict

    @property
    def authors(self) -> list[str]:
        return split_names(self.fields.get("authors") or self.fields.get("author", ""))

    @property
    def editors(self) -> list[str]:
        return split_names(self.fields.get("editors", ""))


def build_record(kind: Union[str, DocKind], fields: dict) -> BibRecord:
    kind = as_kind(kind)
    if not isinstance(fields, dict):
        raise RecordError("fields must be a mapping of field name to text")
    schema = SCHEMAS[kind]
    known = {f.name for f in schema}
    unknown = sorted(set(fields) - known)
    if unknown:
        raise RecordError(f"unknown field {unknown[0]!r} for {kind.value}")

    clean = {}
    for spec in schema:
        raw = fields.get(spec.name)
        value = "" if raw is None else str(raw).strip()
        if not value:
            if not spec.optional:
                raise RecordError(f"missing required field {spec.name!r}")
            continue
        if spec.name in _NAME_LISTS:
            names = split_names(value)
            if not names:
                raise RecordError(f"missing required field {spec.name!r}")
            value = "; ".join(names)
        clean[spec.name] = value

    if not _YEAR_RE.fullmatch(clean["year"]):
        raise RecordError(f"malformed year {clean['year']!r} (expected 4 digits)")
    url = clean.get("url")
    if url is not None and any(ch.isspace() for ch in url):
        raise RecordError(f"malformed url {url!r}")
    return BibRecord(kind, clean)


def synthesized_url(record: BibRecord) -> str:
    digest = hashlib.sha256(
        json.dumps([record.kind.value, sorted(record.fields.items())], ensure_ascii=False).encode()
    ).hexdigest()
    return f"bib:{record.kind.value}:{digest[:32]}"


def to_soif(record: BibRecord) -> SoifRecord:
    url = record.fields.get("url") or synthesized_url(record)
    attrs = tuple((spec.name, record.fields[spec.name].encode("utf-8"))
                  for spec in SCHEMAS[record.kind] if spec.name in record.fields)
    return SoifRecord(record.kind.value, url, attrs)


def read_batch(lines: Iterable[str]) -> Iterator[tuple[int, Union[BibRecord, RecordError]]]:
    """Yield (line number, record or error) for a JSON-lines batch file."""
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            yield lineno, build_record(obj["kind"], obj["fields"])
        except RecordError as exc:
            yield lineno, exc
        except (ValueError, KeyError, TypeError) as exc:
            yield lineno, RecordError(f"malformed batch line: {exc}")


def encode_soif_input(record: SoifRecord) -> str:
    return base64.b64encode(serialize([record])).decode("ascii")


def send_record(record: BibRecord, broker_address: str, sender: str = "paa:ingest",
                timeout: float = 10.0) -> dict:
    """Submit *record* and return the broker's reply payload (resource_name, id, url, vector)."""
    from trilogy.agentbus.protocol import AgentClient, ServiceFailure

    soif = to_soif(record)
    try:
        with AgentClient(broker_address, sender, timeout=timeout) as client:
            return client.call_service("add-document", [encode_soif_input(soif)], user=sender)
    except ServiceFailure as exc:
        raise SubmitError(exc.reason) from None
    except OSError as exc:
        raise SubmitError(f"cannot reach broker at {broker_address}: {exc}", network=True) from None


def submit(record: BibRecord, broker_address: str, sender: str = "paa:ingest",
           timeout: float = 10.0) -> tuple[str, int]:
    """Add *record* to the broker behind *broker_address*; return (resource name, doc id)."""
    payload = send_record(record, broker_address, sender, timeout)
    return payload["resource_name"], int(payload["id"])
