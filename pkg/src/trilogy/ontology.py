"""Concept hierarchy and the weighted keyword -> concept table.

An :class:`Ontology` is an immutable snapshot.  Mutating helpers
(:func:`add_concept`, :func:`set_link`) return a new snapshot and leave the
original untouched, so a broker can swap ontologies atomically.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Optional

MIN_WEIGHT = 1
MAX_WEIGHT = 20
MAX_KEYWORD_TOKENS = 8

_TOKEN_RE = re.compile(r"\w+")


class OntologyError(ValueError):
    """Raised when an ontology source or mutation violates an invariant."""


def tokenize(text: str) -> list[str]:
    """Case-folded word tokens of *text*."""
    return _TOKEN_RE.findall(text.casefold())


def canonical_keyword(keyword: str) -> str:
    """Canonical lookup form of a keyword phrase: folded tokens joined by one space."""
    return " ".join(tokenize(keyword))


def fold(name: str) -> str:
    return name.strip().casefold()


def _bad_text(text: str) -> bool:
    # must survive a trip through the TSV files unchanged
    return text != text.strip() or text.startswith("#") or any(ch in text for ch in "\t\r\n")


@dataclass(frozen=True)
class Concept:
    name: str
    parent: Optional[str] = None


@dataclass(frozen=True)
class KeywordLink:
    keyword: str
    concept: str
    weight: int

    @property
    def key(self) -> str:
        return canonical_keyword(self.keyword)


class Ontology:
    """A concept forest plus keyword links.

    The constructor does not enforce invariants; use :func:`validate` to get a
    report, or the checked constructors (:func:`load_ontology`,
    :func:`add_concept`, :func:`set_link`, :meth:`Ontology.build`).
    """

    __slots__ = ("_concepts", "_links", "_by_keyword", "_names", "cache")

    def __init__(self, concepts: Iterable[Concept] = (), links: Iterable[KeywordLink] = ()):
        self._concepts = tuple(concepts)
        self._names: dict[str, Concept] = {}
        for c in self._concepts:
            self._names.setdefault(fold(c.name), c)
        # links name concepts by their canonical spelling
        self._links = tuple(
            KeywordLink(ln.keyword, self._names[fold(ln.concept)].name, ln.weight)
            if fold(ln.concept) in self._names else ln
            for ln in links
        )
        # derived data (phrase matchers etc.) keyed by consumer; safe because snapshots never change
        self.cache: dict = {}
        by_keyword: dict[str, list[KeywordLink]] = {}
        for link in self._links:
            by_keyword.setdefault(link.key, []).append(link)
        self._by_keyword = MappingProxyType(
            {k: tuple(sorted(v, key=lambda ln: (-ln.weight, fold(ln.concept), ln.concept)))
             for k, v in by_keyword.items()}
        )

    @classmethod
    def build(cls, concepts: Iterable[Concept] = (), links: Iterable[KeywordLink] = ()) -> "Ontology":
        onto = cls(concepts, links)
        problems = validate(onto)
        if problems:
            raise OntologyError(problems[0])
        return onto

    @property
    def concepts(self) -> tuple[Concept, ...]:
        return self._concepts

    @property
    def links(self) -> tuple[KeywordLink, ...]:
        return self._links

    @property
    def keyword_table(self):
        """Read-only map canonical keyword -> links sorted by weight descending."""
        return self._by_keyword

    def concept(self, name: str) -> Optional[Concept]:
        return self._names.get(fold(name))

    def __contains__(self, name: str) -> bool:
        return self.concept(name) is not None

    def children(self, name: str) -> list[str]:
        key = fold(name)
        return [c.name for c in self._concepts if c.parent is not None and fold(c.parent) == key]

    def keywords(self) -> list[str]:
        return sorted(self._by_keyword)

    def weight(self, keyword: str, concept: str) -> Optional[int]:
        for link in self._by_keyword.get(canonical_keyword(keyword), ()):
            if fold(link.concept) == fold(concept):
                return link.weight
        return None

    def fingerprint(self) -> str:
        h, l = serialize_ontology(self)
        return hashlib.sha256(h.encode() + b"\0" + l.encode()).hexdigest()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Ontology):
            return NotImplemented
        return set(self._concepts) == set(other._concepts) and set(self._links) == set(other._links)

    def __hash__(self) -> int:
        return hash((frozenset(self._concepts), frozenset(self._links)))

    def __repr__(self) -> str:
        return f"Ontology({len(self._concepts)} concepts, {len(self._links)} links)"


def validate(ontology: Ontology) -> list[str]:
    """Return a list of invariant violations; empty means the ontology is valid."""
    problems: list[str] = []
    names: dict[str, str] = {}
    for c in ontology.concepts:
        if not c.name or not c.name.strip():
            problems.append(f"concept {c.name!r}: empty name")
            continue
        if _bad_text(c.name):
            problems.append(f"concept {c.name!r}: name has surrounding whitespace, control characters or a leading '#'")
        key = fold(c.name)
        if key in names:
            problems.append(f"concept {c.name!r}: duplicate name (clashes with {names[key]!r})")
        else:
            names[key] = c.name

    parents: dict[str, Optional[str]] = {}
    for c in ontology.concepts:
        parent = fold(c.parent) if c.parent else None
        if parent is not None and parent not in names:
            problems.append(f"concept {c.name!r}: unknown parent {c.parent!r}")
        parents.setdefault(fold(c.name), parent)

    reported: set[str] = set()
    for start in parents:
        seen = [start]
        node = parents.get(start)
        while node is not None and node in parents:
            if node in seen:
                cycle = seen[seen.index(node):]
                if not reported.intersection(cycle):
                    reported.update(cycle)
                    path = " -> ".join(names.get(n, n) for n in cycle + [node])
                    problems.append(f"concept {names.get(node, node)!r}: hierarchy cycle {path}")
                break
            seen.append(node)
            node = parents.get(node)

    pairs: set[tuple[str, str]] = set()
    for link in ontology.links:
        label = f"link ({link.keyword!r}, {link.concept!r})"
        n_tokens = len(tokenize(link.keyword))
        if not link.keyword.strip() or n_tokens == 0:
            problems.append(f"{label}: empty keyword")
        elif n_tokens > MAX_KEYWORD_TOKENS or len(link.keyword.split()) > MAX_KEYWORD_TOKENS:
            problems.append(f"{label}: keyword longer than {MAX_KEYWORD_TOKENS} tokens")
        elif _bad_text(link.keyword):
            problems.append(f"{label}: keyword has surrounding whitespace, control characters or a leading '#'")
        if isinstance(link.weight, bool) or not isinstance(link.weight, int):
            problems.append(f"{label}: weight {link.weight!r} is not an integer")
        elif not MIN_WEIGHT <= link.weight <= MAX_WEIGHT:
            problems.append(f"{label}: weight out of bounds ({link.weight} not in [{MIN_WEIGHT}, {MAX_WEIGHT}])")
        if fold(link.concept) not in names:
            problems.append(f"{label}: unknown concept {link.concept!r}")
        pair = (link.key, fold(link.concept))
        if pair in pairs:
            problems.append(f"{label}: duplicate (keyword, concept) pair")
        pairs.add(pair)
    return problems


def _rows(source: str):
    for lineno, line in enumerate(source.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        yield lineno, line.split("\t")


def read_ontology(hierarchy_source: str, links_source: str) -> Ontology:
    """Parse the TSV sources without checking cross-row invariants (see :func:`validate`)."""
    concepts = []
    for lineno, cols in _rows(hierarchy_source):
        if len(cols) > 2 or not cols[0].strip():
            raise OntologyError(f"hierarchy line {lineno}: malformed row")
        parent = cols[1].strip() if len(cols) == 2 and cols[1].strip() else None
        concepts.append(Concept(cols[0].strip(), parent))

    links = []
    for lineno, cols in _rows(links_source):
        if len(cols) != 3:
            raise OntologyError(f"links line {lineno}: malformed row (expected 3 columns)")
        keyword, concept, raw_weight = (c.strip() for c in cols)
        try:
            weight = int(raw_weight)
        except ValueError:
            raise OntologyError(f"links line {lineno}: malformed weight {raw_weight!r}") from None
        links.append(KeywordLink(keyword, concept, weight))
    return Ontology(concepts, links)


def load_ontology(hierarchy_source: str, links_source: str) -> Ontology:
    """Parse the hierarchy and links TSV texts into a validated ontology."""
    onto = read_ontology(hierarchy_source, links_source)
    problems = validate(onto)
    if problems:
        raise OntologyError(problems[0])
    return onto


def serialize_ontology(ontology: Ontology) -> tuple[str, str]:
    """Render (hierarchy_source, links_source) in the TSV formats read by :func:`load_ontology`."""
    hierarchy = "".join(f"{c.name}\t{c.parent or ''}\n" for c in ontology.concepts)
    links = "".join(f"{ln.keyword}\t{ln.concept}\t{ln.weight}\n" for ln in ontology.links)
    return hierarchy, links


def load_ontology_dir(directory, check: bool = True) -> Ontology:
    directory = Path(directory)
    return (load_ontology if check else read_ontology)(
        (directory / "hierarchy.tsv").read_text(encoding="utf-8"),
        (directory / "links.tsv").read_text(encoding="utf-8"),
    )


def save_ontology_dir(ontology: Ontology, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    hierarchy, links = serialize_ontology(ontology)
    (directory / "hierarchy.tsv").write_text("# concept\tparent\n" + hierarchy, encoding="utf-8")
    (directory / "links.tsv").write_text("# keyword\tconcept\tweight\n" + links, encoding="utf-8")


def seed_ontology() -> Ontology:
    """The ontology shipped with the package (six root topics plus the sample table)."""
    data = resources.files("trilogy") / "data"
    return load_ontology(
        (data / "hierarchy.tsv").read_text(encoding="utf-8"),
        (data / "links.tsv").read_text(encoding="utf-8"),
    )


def add_concept(ontology: Ontology, name: str, parent: Optional[str] = None) -> Ontology:
    name = name.strip()
    if not name:
        raise OntologyError("concept name must be non-empty")
    if name in ontology:
        raise OntologyError(f"duplicate concept {name!r}")
    if parent is not None and parent.strip():
        parent = parent.strip()
        if fold(parent) == fold(name):
            raise OntologyError(f"concept {name!r} cannot be its own parent (cycle)")
        existing = ontology.concept(parent)
        if existing is None:
            raise OntologyError(f"unknown parent concept {parent!r}")
        parent = existing.name
    else:
        parent = None
    # a brand-new leaf cannot close a cycle, but re-check the whole snapshot anyway
    return Ontology.build(ontology.concepts + (Concept(name, parent),), ontology.links)


def set_link(ontology: Ontology, keyword: str, concept: str, weight: int) -> Ontology:
    """Upsert the (keyword, concept) link with *weight*."""
    if not tokenize(keyword):
        raise OntologyError("empty keyword")
    if isinstance(weight, bool) or not isinstance(weight, int) or not MIN_WEIGHT <= weight <= MAX_WEIGHT:
        raise OntologyError(f"weight out of bounds ({weight!r} not in [{MIN_WEIGHT}, {MAX_WEIGHT}])")
    target = ontology.concept(concept)
    if target is None:
        raise OntologyError(f"unknown concept {concept!r}")
    key = canonical_keyword(keyword)
    links = []
    replaced = False
    for link in ontology.links:
        if link.key == key and fold(link.concept) == fold(target.name):
            links.append(KeywordLink(link.keyword, link.concept, weight))
            replaced = True
        else:
            links.append(link)
    if not replaced:
        links.append(KeywordLink(keyword.strip(), target.name, weight))
    return Ontology.build(ontology.concepts, links)


def concepts_for(ontology: Ontology, keyword: str) -> list[tuple[str, int]]:
    """Concepts linked to *keyword*, heaviest first, ties by concept name."""
    return [(ln.concept, ln.weight) for ln in ontology.keyword_table.get(canonical_keyword(keyword), ())]


def subtree(ontology: Ontology, concept: str) -> set[str]:
    """*concept* plus all of its transitive descendants."""
    root = ontology.concept(concept)
    if root is None:
        raise OntologyError(f"unknown concept {concept!r}")
    children: dict[str, list[str]] = {}
    for c in ontology.concepts:
        if c.parent:
            children.setdefault(fold(c.parent), []).append(c.name)
    out = {root.name}
    stack = [root.name]
    while stack:
        for child in children.get(fold(stack.pop()), ()):
            if child not in out:
                out.add(child)
                stack.append(child)
    return out
