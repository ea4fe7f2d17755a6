"""Keyword extraction, concept vectors and the inverted concept index.

Pipeline per document: ontology keyword occurrences (longest phrase first,
non-overlapping) -> summed link weights per concept -> L1 normalisation ->
postings in the inverted concept index.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from types import MappingProxyType
from typing import Callable, Iterable, Mapping, Optional

from trilogy.ontology import Ontology, tokenize
from trilogy.soif import SoifError, SoifRecord, gather, guess_media_hint, parse

log = logging.getLogger(__name__)

MATCH_FIELDS = ("title", "keywords", "abstract")

MatchCounts = dict  # canonical keyword -> occurrence count
ConceptVector = dict  # concept name -> emphasis


class PhraseMatcher:
    """Leftmost-longest, non-overlapping phrase matcher over token sequences."""

    def __init__(self, phrases: Iterable[str]):
        self._phrases: set[tuple[str, ...]] = set()
        self._lengths: dict[str, list[int]] = {}
        for phrase in phrases:
            toks = tuple(tokenize(phrase))
            if not toks:
                continue
            self._phrases.add(toks)
            self._lengths.setdefault(toks[0], []).append(len(toks))
        for first, lengths in self._lengths.items():
            self._lengths[first] = sorted(set(lengths), reverse=True)

    def scan(self, tokens: list[str]):
        """Yield ``(start, phrase)`` for each match; *phrase* is the canonical space-joined form."""
        i = 0
        n = len(tokens)
        while i < n:
            for length in self._lengths.get(tokens[i], ()):
                cand = tuple(tokens[i:i + length])
                if len(cand) == length and cand in self._phrases:
                    yield i, " ".join(cand)
                    i += length
                    break
            else:
                i += 1


def ontology_matcher(ontology: Ontology) -> PhraseMatcher:
    matcher = ontology.cache.get("phrase-matcher")
    if matcher is None:
        matcher = ontology.cache["phrase-matcher"] = PhraseMatcher(ontology.keyword_table)
    return matcher


def record_fields(record: SoifRecord) -> list[list[str]]:
    """Token lists of the matchable fields; phrases never span two fields."""
    return [tokenize(record.text(name)) for name in MATCH_FIELDS]


def extract_matches(record: SoifRecord, ontology: Ontology) -> MatchCounts:
    matcher = ontology_matcher(ontology)
    counts: MatchCounts = {}
    for tokens in record_fields(record):
        for _, phrase in matcher.scan(tokens):
            counts[phrase] = counts.get(phrase, 0) + 1
    return counts


def text_matches(text: str, ontology: Ontology) -> MatchCounts:
    counts: MatchCounts = {}
    for _, phrase in ontology_matcher(ontology).scan(tokenize(text)):
        counts[phrase] = counts.get(phrase, 0) + 1
    return counts


def concept_vector(matches: Mapping[str, int], ontology: Ontology) -> ConceptVector:
    raw: dict[str, int] = {}
    table = ontology.keyword_table
    for keyword, count in matches.items():
        for link in table.get(keyword, ()):
            raw[link.concept] = raw.get(link.concept, 0) + count * link.weight
    total = sum(raw.values())
    if total == 0:
        return {}
    return {concept: score / total for concept, score in sorted(raw.items())}


def query_terms(text: str, ontology: Ontology) -> list[str]:
    """Split free query text into ontology phrases plus the leftover single tokens."""
    tokens = tokenize(text)
    covered = [False] * len(tokens)
    terms: list[str] = []
    for start, phrase in ontology_matcher(ontology).scan(tokens):
        length = len(phrase.split(" "))
        for j in range(start, start + length):
            covered[j] = True
        terms.append(phrase)
    terms.extend(tok for tok, used in zip(tokens, covered) if not used)
    return list(dict.fromkeys(terms))


class InvertedIndex:
    """Immutable map concept -> postings ``((doc_id, emphasis), ...)``.

    Postings are sorted by emphasis descending, ties by doc id ascending.
    """

    __slots__ = ("_postings",)

    def __init__(self, postings: Optional[Mapping[str, tuple]] = None):
        self._postings = MappingProxyType(dict(postings or {}))

    @staticmethod
    def _order(posting):
        return (-posting[1], posting[0])

    @classmethod
    def from_vectors(cls, vectors: Mapping[int, ConceptVector]) -> "InvertedIndex":
        postings: dict[str, list] = {}
        for doc_id, vector in vectors.items():
            for concept, emphasis in vector.items():
                postings.setdefault(concept, []).append((doc_id, emphasis))
        return cls({c: tuple(sorted(p, key=cls._order)) for c, p in sorted(postings.items())})

    def postings(self, concept: str) -> tuple:
        return self._postings.get(concept, ())

    def concepts(self) -> list[str]:
        return list(self._postings)

    def items(self):
        return self._postings.items()

    def with_document(self, doc_id: int, vector: ConceptVector) -> "InvertedIndex":
        postings = dict(self._postings)
        for concept, emphasis in vector.items():
            merged = [p for p in postings.get(concept, ()) if p[0] != doc_id]
            merged.append((doc_id, emphasis))
            postings[concept] = tuple(sorted(merged, key=self._order))
        return InvertedIndex(postings)

    def without_document(self, doc_id: int, vector: ConceptVector) -> "InvertedIndex":
        postings = dict(self._postings)
        for concept in vector:
            remaining = tuple(p for p in postings.get(concept, ()) if p[0] != doc_id)
            if remaining:
                postings[concept] = remaining
            else:
                postings.pop(concept, None)
        return InvertedIndex(postings)

    def as_dict(self) -> dict:
        return {c: [list(p) for p in ps] for c, ps in self._postings.items()}

    def __eq__(self, other):
        if not isinstance(other, InvertedIndex):
            return NotImplemented
        return dict(self._postings) == dict(other._postings)

    def __len__(self):
        return len(self._postings)

    def __repr__(self):
        return f"InvertedIndex({len(self._postings)} concepts)"


def build_index(documents: Iterable[tuple[int, SoifRecord]], ontology: Ontology):
    """Return ``(vectors, index)`` for ``(doc_id, record)`` pairs."""
    vectors: dict[int, ConceptVector] = {}
    for doc_id, record in documents:
        if doc_id in vectors:
            raise ValueError(f"duplicate document id {doc_id}")
        vectors[doc_id] = concept_vector(extract_matches(record, ontology), ontology)
    return vectors, InvertedIndex.from_vectors(vectors)


# -- collection maintenance ---------------------------------------------------

@dataclass(frozen=True)
class ProbeResult:
    status: str  # "available" | "unavailable" | "changed"
    data: Optional[bytes] = None


AVAILABLE = ProbeResult("available")
UNAVAILABLE = ProbeResult("unavailable")


def changed(data: bytes) -> ProbeResult:
    return ProbeResult("changed", data)


Probe = Callable[[str], ProbeResult]

REMOVE_AFTER_FAILURES = 2


@dataclass(frozen=True)
class MaintenanceReport:
    refreshed: int = 0
    removed: int = 0
    failed_probe: int = 0
    elapsed: float = 0.0  # milliseconds


def regather(old: SoifRecord, data: bytes, now: Optional[float] = None) -> SoifRecord:
    """Summarise fresh source bytes for an existing record, keeping its url and kind."""
    if old.template_type == "FILE":
        return gather(data, guess_media_hint(old.url, data), old.url, now=now)
    try:
        recs = parse(data)
        if len(recs) == 1:
            return SoifRecord(old.template_type, old.url, recs[0].attributes)
    except SoifError:
        pass
    return gather(data, "bib", old.url, now=now)


def refresh(store, ontology: Ontology, probe: Probe, now: Optional[float] = None) -> MaintenanceReport:
    """Probe every document in *store*, drop dead ones, re-gather changed ones, rebuild and swap.

    A document is removed once its probe has failed on
    ``REMOVE_AFTER_FAILURES`` consecutive refreshes.  Probe exceptions count
    as failures and are never propagated.
    """
    started = time.perf_counter()
    now = time.time() if now is None else now
    refreshed = removed = failed = 0
    with store.write_lock():
        kept = []
        for entry in store.entries():
            try:
                result = probe(entry.record.url)
                if result.status not in ("available", "unavailable", "changed"):
                    raise ValueError(f"bad probe status {result.status!r}")
            except Exception as exc:  # probe failures are data, not errors
                log.warning("probe failed for %s: %s", entry.record.url, exc)
                result = UNAVAILABLE

            if result.status == "unavailable":
                failed += 1
                entry = entry.failed()
                if entry.failure_count >= REMOVE_AFTER_FAILURES:
                    removed += 1
                    log.info("removing %s after %d failed probes", entry.record.url, entry.failure_count)
                    continue
                kept.append(entry)
                continue

            record = entry.record
            if result.status == "changed":
                try:
                    fresh = regather(record, result.data or b"", now=now)
                except (SoifError, ValueError) as exc:
                    log.warning("re-gather failed for %s: %s", record.url, exc)
                    failed += 1
                    entry = entry.failed()
                    if entry.failure_count >= REMOVE_AFTER_FAILURES:
                        removed += 1
                        continue
                    kept.append(entry)
                    continue
                if fresh.without("gathered-time") != record.without("gathered-time"):
                    record = fresh
                    refreshed += 1
            kept.append(entry.verified(record, now))
        store.publish(kept, ontology)
    return MaintenanceReport(refreshed, removed, failed, (time.perf_counter() - started) * 1000.0)


def local_file_probe(url: str) -> ProbeResult:
    """Default probe: re-read ``file://`` urls and plain paths; other schemes are assumed available.

    An existing file is always reported as changed; :func:`refresh` decides
    whether the re-gathered summary actually differs.
    """
    from urllib.parse import unquote, urlparse

    parsed = urlparse(url)
    if parsed.scheme == "file":
        path = unquote(parsed.path)
    elif parsed.scheme == "" or (len(parsed.scheme) == 1 and url[1:3] in (":\\", ":/")):
        path = url
    else:
        return AVAILABLE
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError:
        return UNAVAILABLE
    return changed(data) if data else UNAVAILABLE
