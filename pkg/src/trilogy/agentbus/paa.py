"""Personal assistant agents: query fan-out and merging, user profiles, proactive notification."""

from __future__ import annotations

import json
import logging
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

from trilogy.agentbus.protocol import NOTIFY, AgentClient, Message, ServiceFailure
from trilogy.broker import SEARCH_BY_KEYWORD, SEARCH_BY_TOPIC
from trilogy.indexer import ConceptVector, concept_vector, query_terms, text_matches
from trilogy.ontology import Ontology, subtree

log = logging.getLogger(__name__)

PROFILE_BLEND = 0.8
NOTIFY_THRESHOLD = 0.5


class MediatorUnreachable(ConnectionError):
    pass


@dataclass
class HistoryItem:
    timestamp: float
    query: str
    concepts: list


@dataclass
class UserProfile:
    user: str
    interests: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    notifications: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "user": self.user,
            "interests": self.interests,
            "history": [[h.timestamp, h.query, list(h.concepts)] for h in self.history],
            "notifications": self.notifications,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "UserProfile":
        return cls(
            data["user"],
            {k: float(v) for k, v in data.get("interests", {}).items()},
            [HistoryItem(float(t), q, list(c)) for t, q, c in data.get("history", [])],
            list(data.get("notifications", [])),
        )


def normalize(vector: Mapping[str, float]) -> ConceptVector:
    total = sum(v for v in vector.values() if v > 0)
    if total <= 0:
        return {}
    return {k: v / total for k, v in sorted(vector.items()) if v > 0}


def update_profile(profile: UserProfile, vector: Mapping[str, float], blend: float = PROFILE_BLEND) -> UserProfile:
    """Blend *vector* into the interests: ``normalize(blend * interests + (1 - blend) * vector)``."""
    if not vector:
        return UserProfile(profile.user, dict(profile.interests), profile.history, profile.notifications)
    mixed: dict[str, float] = {}
    for k, v in profile.interests.items():
        mixed[k] = mixed.get(k, 0.0) + blend * v
    for k, v in vector.items():
        mixed[k] = mixed.get(k, 0.0) + (1.0 - blend) * v
    return UserProfile(profile.user, normalize(mixed), profile.history, profile.notifications)


def similarity(a: Mapping[str, float], b: Mapping[str, float]) -> float:
    """Cosine similarity of two concept vectors, 0 when either is empty."""
    if not a or not b:
        return 0.0
    dot = sum(v * b[k] for k, v in a.items() if k in b)
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0 or nb == 0:
        return 0.0
    return min(1.0, max(0.0, dot / (na * nb)))


@dataclass(frozen=True)
class NewDocument:
    url: str
    vector: dict
    origin: Optional[str] = None

    kind = "new-document"

    @property
    def trigger(self) -> str:
        return self.url


@dataclass(frozen=True)
class PeerQuery:
    user: str
    vector: dict

    kind = "peer-query"

    @property
    def origin(self) -> str:
        return self.user

    @property
    def trigger(self) -> str:
        return self.user


def proactive_scan(event: Union[NewDocument, PeerQuery], profiles: Iterable[UserProfile],
                   threshold: float = NOTIFY_THRESHOLD, sender: str = "paa:assistant") -> list[Message]:
    """NOTIFY every user (except the originator) whose interests are close enough to the event."""
    out = []
    for profile in sorted(profiles, key=lambda p: p.user):
        if profile.user == event.origin:
            continue
        score = similarity(profile.interests, event.vector)
        if score >= threshold:
            out.append(Message(NOTIFY, sender, {
                "user": profile.user, "event": event.kind, "trigger": event.trigger, "similarity": score}))
    return out


class ProfileStore:
    """Profiles kept in one JSON file (or only in memory when *path* is None)."""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path else None
        self._lock = threading.RLock()
        self._profiles: dict[str, UserProfile] = {}
        if self.path and self.path.exists():
            data = json.loads(self.path.read_text(encoding="utf-8"))
            self._profiles = {p["user"]: UserProfile.from_dict(p) for p in data.get("profiles", [])}

    def get(self, user: str) -> UserProfile:
        with self._lock:
            return self._profiles.get(user) or UserProfile(user)

    def put(self, profile: UserProfile) -> None:
        with self._lock:
            self._profiles[profile.user] = profile

    def all(self) -> list[UserProfile]:
        with self._lock:
            return list(self._profiles.values())

    def deliver(self, notes: Iterable[Message]) -> None:
        with self._lock:
            for note in notes:
                user = note.body["user"]
                profile = self.get(user)
                profile.notifications.append(note.to_json())
                self._profiles[user] = profile

    def take_notifications(self, user: str) -> list[dict]:
        with self._lock:
            profile = self.get(user)
            notes, profile.notifications = profile.notifications, []
            if user in self._profiles:
                self._profiles[user] = profile
            return notes

    def save(self) -> None:
        if self.path is None:
            return
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            tmp = self.path.with_name(self.path.name + ".tmp")
            tmp.write_text(json.dumps(
                {"profiles": [p.to_dict() for p in sorted(self._profiles.values(), key=lambda p: p.user)]},
                indent=1), encoding="utf-8")
            os.replace(tmp, self.path)


@dataclass(frozen=True)
class MergedHit:
    score: float
    resource: str
    url: str
    title: str


@dataclass
class MergedResult:
    hits: list
    warnings: list = field(default_factory=list)
    concepts: list = field(default_factory=list)
    terms: list = field(default_factory=list)
    resources: list = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return bool(self.warnings)


def merge_hits(results: Iterable[tuple[str, Sequence[dict]]], limit: Optional[int] = None) -> list[MergedHit]:
    """Deduplicate hits by url keeping the highest score, ranked by score then url."""
    best: dict[str, MergedHit] = {}
    for resource, hits in results:
        for h in hits:
            cand = MergedHit(float(h["score"]), resource, h["url"], h.get("title", ""))
            cur = best.get(cand.url)
            if cur is None or (cand.score, cur.resource) > (cur.score, cand.resource):
                best[cand.url] = cand
    ranked = sorted(best.values(), key=lambda h: (-h.score, h.url))
    return ranked if limit is None else ranked[:limit]


class PersonalAssistant:
    """Acts for users: consults mediators, fans queries out to brokers, keeps profiles."""

    def __init__(self, ontology: Ontology, mediators: Sequence[str], profiles: Optional[ProfileStore] = None,
                 blend: float = PROFILE_BLEND, threshold: float = NOTIFY_THRESHOLD,
                 timeout: Optional[float] = 10.0, name: str = "assistant"):
        self.ontology = ontology
        self.mediators = list(mediators)
        self.profiles = profiles or ProfileStore()
        self.blend = blend
        self.threshold = threshold
        self.timeout = timeout
        self.name = f"paa:{name}"

    # -- mediator access ------------------------------------------------------

    def _route(self, kind: str, value: str, warnings: list) -> dict[str, dict]:
        found: dict[str, dict] = {}
        reached = 0
        for address in self.mediators:
            try:
                with AgentClient(address, self.name, timeout=self.timeout) as client:
                    for res in client.route(kind, value):
                        found.setdefault(res["resource_name"], res)
                reached += 1
            except (OSError, ServiceFailure) as exc:
                warnings.append(f"mediator {address} unreachable: {exc}")
        if self.mediators and reached == 0:
            raise MediatorUnreachable("; ".join(warnings[-len(self.mediators):]))
        return found

    def plan(self, text: str) -> tuple[list[str], list[str], ConceptVector]:
        """Return (candidate topics, keyword terms, query concept vector) for *text*."""
        vector = concept_vector(text_matches(text, self.ontology), self.ontology)
        topics = list(vector)
        named = self.ontology.concept(text)
        if named is not None and named.name not in topics:
            topics.append(named.name)
        return sorted(topics), query_terms(text, self.ontology), vector

    def query(self, user: str, text: str, limit: int = 20) -> MergedResult:
        if not self.mediators:
            raise MediatorUnreachable("no mediator configured")
        topics, terms, vector = self.plan(text)
        warnings: list[str] = []
        resources: dict[str, dict] = {}
        for topic in topics:
            for name, res in self._route("topic", topic, warnings).items():
                resources.setdefault(name, res)
        for term in terms:
            for name, res in self._route("keyword", term, warnings).items():
                resources.setdefault(name, res)

        concepts = sorted({c for t in topics for c in subtree(self.ontology, t)})
        calls = []
        for name in sorted(resources):
            res = resources[name]
            services = {s["name"] for s in res.get("descriptor", {}).get("services", [])}
            if concepts and SEARCH_BY_TOPIC in services:
                calls.append((name, res["address"], SEARCH_BY_TOPIC, "\n".join(concepts)))
            if terms and SEARCH_BY_KEYWORD in services:
                calls.append((name, res["address"], SEARCH_BY_KEYWORD, text))

        def call(item):
            name, address, service, arg = item
            try:
                with AgentClient(address, self.name, timeout=self.timeout) as client:
                    payload = client.call_service(service, [arg], user)
                return name, payload.get("hits", []), None
            except ServiceFailure as exc:
                return name, [], f"{name} {service} failed ({exc.failure_class}): {exc.reason}"
            except OSError as exc:
                return name, [], f"{name} unreachable at {address}: {exc}"

        gathered = []
        if calls:
            with ThreadPoolExecutor(max_workers=min(16, len(calls))) as pool:
                for name, hits, warning in pool.map(call, calls):
                    gathered.append((name, hits))
                    if warning:
                        warnings.append(warning)

        result = MergedResult(merge_hits(gathered, limit), warnings, concepts, terms, sorted(resources))
        self.record_query(user, text, vector, concepts)
        return result

    def record_query(self, user: str, text: str, vector: ConceptVector, concepts: Sequence[str]) -> list[Message]:
        profile = update_profile(self.profiles.get(user), vector, self.blend)
        profile.history = list(profile.history) + [HistoryItem(time.time(), text, list(concepts))]
        self.profiles.put(profile)
        notes = []
        if vector:
            others = [p for p in self.profiles.all() if p.user != user]
            notes = proactive_scan(PeerQuery(user, vector), others, self.threshold, self.name)
            self.profiles.deliver(notes)
        self.profiles.save()
        return notes

    def document_added(self, url: str, vector: ConceptVector, origin: Optional[str] = None) -> list[Message]:
        notes = proactive_scan(NewDocument(url, dict(vector), origin), self.profiles.all(),
                               self.threshold, self.name)
        self.profiles.deliver(notes)
        self.profiles.save()
        return notes

    def request_service(self, resource_name: str, service: str, inputs: Sequence[str], user: str,
                        on_queued=None):
        """Locate *resource_name* through the mediators and run *service*; raises ServiceFailure."""
        warnings: list[str] = []
        found = self._route("resource", resource_name, warnings)
        if resource_name not in found:
            raise ServiceFailure(f"no mediator knows resource {resource_name!r}", "bad_input")
        with AgentClient(found[resource_name]["address"], self.name, timeout=None) as client:
            return client.call_service(service, list(inputs), user, on_queued=on_queued)
