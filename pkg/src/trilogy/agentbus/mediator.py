"""Yellow-pages mediator: resource advertisements and topic/keyword routing."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from typing import Optional

from trilogy.agentbus.protocol import (
    ADVERTISE,
    BAD_INPUT,
    ROUTE_REPLY,
    ROUTE_REQUEST,
    SERVICE_ERROR,
    Agent,
    Connection,
    Message,
    parse_address,
)
from trilogy.broker import BrokerDescriptor
from trilogy.ontology import Ontology, canonical_keyword, fold, subtree

log = logging.getLogger(__name__)

ROUTE_KINDS = ("topic", "keyword", "resource")


class RegistrationError(ValueError):
    pass


@dataclass(frozen=True)
class Advertisement:
    descriptor: BrokerDescriptor
    address: str

    def to_dict(self) -> dict:
        return {"descriptor": self.descriptor.to_dict(), "address": self.address}

    @classmethod
    def from_dict(cls, data: dict) -> "Advertisement":
        if not isinstance(data, dict) or "descriptor" not in data:
            raise RegistrationError("advertisement needs a descriptor")
        try:
            descriptor = BrokerDescriptor.from_dict(data["descriptor"])
            address = str(data.get("address", ""))
            parse_address(address)
        except ValueError as exc:
            raise RegistrationError(str(exc)) from None
        return cls(descriptor, address)


class Registry:
    """Advertisements keyed by resource name.  Thread-safe."""

    def __init__(self):
        self._ads: dict[str, Advertisement] = {}
        self._lock = threading.Lock()

    def register(self, advert: Advertisement) -> None:
        problems = advert.descriptor.problems()
        if problems:
            raise RegistrationError(f"malformed descriptor: {problems[0]}")
        name = advert.descriptor.resource_name
        with self._lock:
            prior = self._ads.get(name)
            if prior is not None and prior.address != advert.address:
                raise RegistrationError(
                    f"resource name {name!r} is already registered by {prior.address}")
            self._ads[name] = advert

    def unregister(self, name: str) -> None:
        with self._lock:
            self._ads.pop(name, None)

    def get(self, name: str) -> Optional[Advertisement]:
        with self._lock:
            return self._ads.get(name)

    def names(self) -> list[str]:
        with self._lock:
            return sorted(self._ads)

    def route(self, query: str, ontology: Ontology, kind: Optional[str] = None) -> list[str]:
        """Resource names serving *query*, sorted.

        A topic query matches resources advertising the topic or any of its
        descendants; a keyword query matches advertised keywords exactly
        (case-insensitively).  Without *kind*, a query naming a known concept
        is treated as a topic.
        """
        with self._lock:
            ads = list(self._ads.values())
        if kind is None:
            kind = "topic" if query in ontology else "keyword"
        if kind == "topic":
            wanted = {fold(query)}
            if query in ontology:
                wanted = {fold(c) for c in subtree(ontology, query)}
            hits = [a for a in ads if wanted.intersection(fold(t) for t in a.descriptor.topics)]
        elif kind == "keyword":
            key = canonical_keyword(query)
            hits = [a for a in ads if key and key in {canonical_keyword(k) for k in a.descriptor.keywords}]
        elif kind == "resource":
            hits = [a for a in ads if a.descriptor.resource_name == query]
        else:
            raise ValueError(f"unknown route kind {kind!r}")
        return sorted(a.descriptor.resource_name for a in hits)


class MediatorAgent(Agent):
    role = "mediator"

    def __init__(self, name: str, ontology: Ontology, listen: str = "127.0.0.1:0"):
        super().__init__(name, listen)
        self.ontology = ontology
        self.registry = Registry()

    def handle(self, msg: Message, conn: Connection) -> None:
        if msg.type == ADVERTISE:
            try:
                advert = Advertisement.from_dict(msg.body)
                self.registry.register(advert)
            except RegistrationError as exc:
                conn.send(msg.reply(SERVICE_ERROR, self.name, {"reason": str(exc), "failure_class": BAD_INPUT}))
                return
            log.info("%s: registered %s at %s", self.name, advert.descriptor.resource_name, advert.address)
            conn.send(msg.reply(ROUTE_REPLY, self.name, {
                "registered": advert.descriptor.resource_name, "resources": []}))
        elif msg.type == ROUTE_REQUEST:
            kind = msg.body.get("kind")
            value = msg.body.get("value")
            if kind not in ROUTE_KINDS or not isinstance(value, str):
                conn.send(msg.reply(SERVICE_ERROR, self.name, {
                    "reason": f"route request needs kind in {ROUTE_KINDS} and a text value",
                    "failure_class": BAD_INPUT}))
                return
            names = self.registry.route(value, self.ontology, kind)
            resources = []
            for name in names:
                ad = self.registry.get(name)
                if ad is not None:
                    resources.append({"resource_name": name, "address": ad.address,
                                      "descriptor": ad.descriptor.to_dict()})
            conn.send(msg.reply(ROUTE_REPLY, self.name, {"resources": resources}))
        else:
            super().handle(msg, conn)
