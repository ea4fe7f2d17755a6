"""Topic broker: SOIF document store, concept and keyword indices, queries, persistence.

Readers always see an immutable :class:`_Snapshot`; writers serialize on a
re-entrant lock and publish a new snapshot with a single attribute store.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Optional, Sequence

from trilogy.indexer import (
    ConceptVector,
    InvertedIndex,
    MatchCounts,
    concept_vector,
    extract_matches,
    record_fields,
)
from trilogy.ontology import Ontology, fold, tokenize
from trilogy.soif import SoifError, SoifRecord, check_record, parse, serialize

log = logging.getLogger(__name__)

INDEX_VERSION = 1
SEARCH_BY_KEYWORD = "search-by-keyword"
SEARCH_BY_TOPIC = "search-by-topic"
ADD_DOCUMENT = "add-document"


class BrokerError(ValueError):
    """A broker operation was rejected (duplicate url, unknown id, bad query...)."""


@dataclass(frozen=True)
class Service:
    name: str
    input_arity: int
    max_instances: int = 1

    def to_dict(self) -> dict:
        return {"name": self.name, "input_arity": self.input_arity, "max_instances": self.max_instances}


@dataclass(frozen=True)
class BrokerDescriptor:
    """What a resource tells the mediator about itself."""

    resource_name: str
    topics: tuple[str, ...] = ()
    keywords: tuple[str, ...] = ()
    services: tuple[Service, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "topics", tuple(self.topics))
        object.__setattr__(self, "keywords", tuple(self.keywords))
        object.__setattr__(self, "services", tuple(
            s if isinstance(s, Service) else Service(**s) for s in self.services))

    def problems(self) -> list[str]:
        out = []
        if not isinstance(self.resource_name, str) or not self.resource_name.strip():
            out.append("resource_name must be non-empty")
        names = set()
        for s in self.services:
            if s.name in names:
                out.append(f"duplicate service {s.name!r}")
            names.add(s.name)
            if not isinstance(s.input_arity, int) or s.input_arity < 0:
                out.append(f"service {s.name!r}: input_arity must be a non-negative integer")
            if not isinstance(s.max_instances, int) or s.max_instances < 1:
                out.append(f"service {s.name!r}: max_instances must be >= 1")
        return out

    def service(self, name: str) -> Optional[Service]:
        return next((s for s in self.services if s.name == name), None)

    def to_dict(self) -> dict:
        return {
            "resource_name": self.resource_name,
            "topics": list(self.topics),
            "keywords": list(self.keywords),
            "services": [s.to_dict() for s in self.services],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BrokerDescriptor":
        try:
            return cls(
                resource_name=data["resource_name"],
                topics=tuple(data.get("topics", ())),
                keywords=tuple(data.get("keywords", ())),
                services=tuple(Service(s["name"], int(s["input_arity"]), int(s.get("max_instances", 1)))
                               for s in data.get("services", ())),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed descriptor: {exc}") from None


@dataclass(frozen=True)
class BrokerSettings:
    resource_name: str
    topics: tuple[str, ...]
    keywords: tuple[str, ...] = ()
    max_instances: int = 1

    def __post_init__(self):
        object.__setattr__(self, "topics", tuple(t.strip() for t in self.topics if t.strip()))
        object.__setattr__(self, "keywords", tuple(k.strip() for k in self.keywords if k.strip()))
        if not self.resource_name or not self.resource_name.strip():
            raise BrokerError("broker resource_name must be non-empty")
        if not self.topics:
            raise BrokerError(f"broker {self.resource_name!r}: topics must not be empty")
        if self.max_instances < 1:
            raise BrokerError("max_instances must be >= 1")


@dataclass(frozen=True)
class DocumentEntry:
    id: int
    record: SoifRecord
    vector: ConceptVector = field(default_factory=dict)
    matches: MatchCounts = field(default_factory=dict)
    failure_count: int = 0
    last_verified: float = 0.0

    def failed(self) -> "DocumentEntry":
        return replace(self, failure_count=self.failure_count + 1)

    def verified(self, record: SoifRecord, when: float) -> "DocumentEntry":
        return replace(self, record=record, failure_count=0, last_verified=when)


@dataclass(frozen=True)
class QueryHit:
    doc_id: int
    url: str
    title: str
    score: float


def rank(hits: Iterable[QueryHit], limit: int) -> list[QueryHit]:
    return sorted(hits, key=lambda h: (-h.score, h.url))[:limit]


class _Snapshot:
    __slots__ = ("entries", "by_url", "index", "tokens", "token_docs", "concept_names")

    def __init__(self, entries, by_url, index, tokens, token_docs):
        self.entries = MappingProxyType(entries)
        self.by_url = MappingProxyType(by_url)
        self.index: InvertedIndex = index
        self.tokens = MappingProxyType(tokens)
        self.token_docs = MappingProxyType(token_docs)
        self.concept_names = {fold(c): c for c in index.concepts()}


def _contains_phrase(fields: Sequence[Sequence[str]], phrase: Sequence[str]) -> bool:
    n = len(phrase)
    for toks in fields:
        for i in range(len(toks) - n + 1):
            if toks[i] == phrase[0] and list(toks[i:i + n]) == list(phrase):
                return True
    return False


class BrokerStore:
    """In-memory broker state with atomic snapshot publication."""

    def __init__(self, ontology: Ontology, settings: Optional[BrokerSettings] = None):
        self.settings = settings
        self._ontology = ontology
        self._lock = threading.RLock()
        self._next_id = 1
        self._snap = _Snapshot({}, {}, InvertedIndex(), {}, {})
        self.load_errors: list[tuple[str, str]] = []

    # -- access ---------------------------------------------------------------

    @property
    def ontology(self) -> Ontology:
        return self._ontology

    @property
    def index(self) -> InvertedIndex:
        return self._snap.index

    def entries(self) -> list[DocumentEntry]:
        snap = self._snap
        return [snap.entries[i] for i in sorted(snap.entries)]

    def get(self, doc_id: int) -> DocumentEntry:
        try:
            return self._snap.entries[doc_id]
        except KeyError:
            raise BrokerError(f"unknown document id {doc_id}") from None

    def vectors(self) -> dict[int, ConceptVector]:
        return {i: e.vector for i, e in self._snap.entries.items()}

    def __len__(self):
        return len(self._snap.entries)

    @contextmanager
    def write_lock(self):
        with self._lock:
            yield

    # -- mutation -------------------------------------------------------------

    def _make_entry(self, doc_id: int, record: SoifRecord, failure_count: int = 0,
                    last_verified: Optional[float] = None) -> DocumentEntry:
        matches = extract_matches(record, self._ontology)
        return DocumentEntry(
            doc_id, record, concept_vector(matches, self._ontology), matches,
            failure_count, time.time() if last_verified is None else last_verified,
        )

    def add_document(self, record: SoifRecord) -> int:
        try:
            check_record(record)
        except SoifError as exc:
            raise BrokerError(f"invalid record: {exc}") from None
        with self._lock:
            snap = self._snap
            if record.url in snap.by_url:
                raise BrokerError(f"duplicate url {record.url!r} (document {snap.by_url[record.url]})")
            doc_id = self._next_id
            entry = self._make_entry(doc_id, record)
            fields = record_fields(record)
            token_docs = dict(snap.token_docs)
            for tok in {t for f in fields for t in f}:
                token_docs[tok] = token_docs.get(tok, frozenset()) | {doc_id}
            self._snap = _Snapshot(
                {**snap.entries, doc_id: entry},
                {**snap.by_url, record.url: doc_id},
                snap.index.with_document(doc_id, entry.vector),
                {**snap.tokens, doc_id: fields},
                token_docs,
            )
            self._next_id = doc_id + 1
            return doc_id

    def remove_document(self, doc_id: int) -> DocumentEntry:
        with self._lock:
            snap = self._snap
            entry = snap.entries.get(doc_id)
            if entry is None:
                raise BrokerError(f"unknown document id {doc_id}")
            entries = dict(snap.entries)
            del entries[doc_id]
            by_url = dict(snap.by_url)
            del by_url[entry.record.url]
            tokens = dict(snap.tokens)
            fields = tokens.pop(doc_id)
            token_docs = dict(snap.token_docs)
            for tok in {t for f in fields for t in f}:
                rest = token_docs[tok] - {doc_id}
                if rest:
                    token_docs[tok] = rest
                else:
                    del token_docs[tok]
            self._snap = _Snapshot(entries, by_url, snap.index.without_document(doc_id, entry.vector),
                                   tokens, token_docs)
            return entry

    def publish(self, entries: Iterable[DocumentEntry], ontology: Optional[Ontology] = None) -> None:
        """Recompute matches, vectors and indices from *entries* and swap them in."""
        with self._lock:
            if ontology is not None:
                self._ontology = ontology
            built: dict[int, DocumentEntry] = {}
            by_url: dict[str, int] = {}
            tokens: dict[int, list] = {}
            token_docs: dict[str, set] = {}
            for e in entries:
                if e.id in built:
                    raise BrokerError(f"duplicate document id {e.id}")
                if e.record.url in by_url:
                    raise BrokerError(f"duplicate url {e.record.url!r}")
                matches = extract_matches(e.record, self._ontology)
                vector = concept_vector(matches, self._ontology)
                built[e.id] = replace(e, matches=matches, vector=vector)
                by_url[e.record.url] = e.id
                fields = record_fields(e.record)
                tokens[e.id] = fields
                for tok in {t for f in fields for t in f}:
                    token_docs.setdefault(tok, set()).add(e.id)
            index = InvertedIndex.from_vectors({i: built[i].vector for i in sorted(built)})
            self._snap = _Snapshot(built, by_url, index, tokens,
                                   {t: frozenset(ids) for t, ids in token_docs.items()})
            if built:
                self._next_id = max(self._next_id, max(built) + 1)

    def set_ontology(self, ontology: Ontology) -> None:
        with self._lock:
            self.publish(self.entries(), ontology)

    # -- queries --------------------------------------------------------------

    def _hit(self, snap: _Snapshot, doc_id: int, score: float) -> QueryHit:
        rec = snap.entries[doc_id].record
        return QueryHit(doc_id, rec.url, rec.text("title"), score)

    def query_keywords(self, terms: Sequence[str], limit: int = 10) -> list[QueryHit]:
        """Rank documents by the fraction of *terms* they contain (phrases on token boundaries)."""
        if not terms:
            raise BrokerError("at least one query term is required")
        if limit < 1:
            raise BrokerError("limit must be positive")
        snap = self._snap
        phrases = [tokenize(t) for t in terms]
        matched: dict[int, int] = {}
        for phrase in phrases:
            if not phrase:
                continue
            candidates = None
            for tok in phrase:
                docs = snap.token_docs.get(tok, frozenset())
                candidates = docs if candidates is None else candidates & docs
                if not candidates:
                    break
            for doc_id in candidates or ():
                if len(phrase) == 1 or _contains_phrase(snap.tokens[doc_id], phrase):
                    matched[doc_id] = matched.get(doc_id, 0) + 1
        total = len(terms)
        return rank((self._hit(snap, d, n / total) for d, n in matched.items()), limit)

    def query_concepts(self, concepts: Sequence[str], limit: int = 10) -> list[QueryHit]:
        """Union of postings; a document scores its largest emphasis among *concepts*."""
        if not concepts:
            raise BrokerError("at least one concept is required")
        if limit < 1:
            raise BrokerError("limit must be positive")
        snap = self._snap
        best: dict[int, float] = {}
        for name in concepts:
            canonical = snap.concept_names.get(fold(name))
            if canonical is None:
                continue
            for doc_id, emphasis in snap.index.postings(canonical):
                if emphasis > best.get(doc_id, 0.0):
                    best[doc_id] = emphasis
        return rank((self._hit(snap, d, s) for d, s in best.items()), limit)

    def describe(self) -> BrokerDescriptor:
        if self.settings is None:
            raise BrokerError("broker has no settings (resource name, topics)")
        s = self.settings
        return BrokerDescriptor(
            s.resource_name, s.topics, s.keywords,
            (Service(SEARCH_BY_KEYWORD, 1, s.max_instances),
             Service(SEARCH_BY_TOPIC, 1, s.max_instances),
             Service(ADD_DOCUMENT, 1, 1)),
        )

    # -- persistence ----------------------------------------------------------

    def store_digest(self) -> str:
        h = hashlib.sha256()
        for e in self.entries():
            h.update(str(e.id).encode() + b"\0" + serialize([e.record]))
        return h.hexdigest()

    def save(self, directory) -> None:
        directory = Path(directory)
        with self._lock:
            store_dir = directory / "store"
            index_dir = directory / "index"
            store_dir.mkdir(parents=True, exist_ok=True)
            index_dir.mkdir(parents=True, exist_ok=True)
            entries = self.entries()
            live = {f"{e.id}.soif" for e in entries}
            for e in entries:
                _write_atomic(store_dir / f"{e.id}.soif", serialize([e.record]))
            for stale in store_dir.glob("*.soif"):
                if stale.name not in live:
                    stale.unlink()
            index_doc = {
                "version": INDEX_VERSION,
                "ontology": self._ontology.fingerprint(),
                "store": self.store_digest(),
                "vectors": {str(e.id): e.vector for e in entries},
                "postings": self._snap.index.as_dict(),
            }
            _write_atomic(index_dir / "concepts.idx", json.dumps(index_doc, sort_keys=True).encode())
            state = {str(e.id): {"failure_count": e.failure_count, "last_verified": e.last_verified}
                     for e in entries}
            _write_atomic(index_dir / "state.json", json.dumps(state, sort_keys=True).encode())

    def persist_entry(self, directory, doc_id: int) -> None:
        """Write one document's SOIF file (used after incremental adds)."""
        store_dir = Path(directory) / "store"
        store_dir.mkdir(parents=True, exist_ok=True)
        _write_atomic(store_dir / f"{doc_id}.soif", serialize([self.get(doc_id).record]))

    def forget_entry(self, directory, doc_id: int) -> None:
        path = Path(directory) / "store" / f"{doc_id}.soif"
        if path.exists():
            path.unlink()

    @classmethod
    def load(cls, directory, ontology: Ontology, settings: Optional[BrokerSettings] = None) -> "BrokerStore":
        """Load a store directory; corrupt SOIF files are skipped and listed in ``load_errors``."""
        directory = Path(directory)
        if not directory.is_dir():
            raise OSError(f"store directory {directory} is not readable")
        store = cls(ontology, settings)
        store_dir = directory / "store"
        state = _read_json(directory / "index" / "state.json") or {}
        entries = []
        if store_dir.is_dir():
            files = sorted(store_dir.glob("*.soif"), key=lambda p: (len(p.stem), p.stem))
            for path in files:
                try:
                    doc_id = int(path.stem)
                    if doc_id < 1:
                        raise ValueError("document id must be positive")
                    records = parse(path.read_bytes())
                    if len(records) != 1:
                        raise SoifError(f"expected one record, found {len(records)}")
                    check_record(records[0])
                except (ValueError, OSError) as exc:
                    log.error("skipping %s: %s", path, exc)
                    store.load_errors.append((str(path), str(exc)))
                    continue
                meta = state.get(str(doc_id), {})
                entries.append(DocumentEntry(
                    doc_id, records[0],
                    failure_count=int(meta.get("failure_count", 0)),
                    last_verified=float(meta.get("last_verified", 0.0)),
                ))
        # the SOIF files are authoritative; concepts.idx is an export, never trusted on load
        try:
            store.publish(entries)
        except BrokerError as exc:
            raise BrokerError(f"store {directory}: {exc}") from None
        return store


def _read_json(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError):
        return None


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
