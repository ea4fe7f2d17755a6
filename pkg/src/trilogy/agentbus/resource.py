"""Resource agents: advertisement, concurrency-limited FIFO scheduling, failure reporting."""

from __future__ import annotations

import base64
import binascii
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Any, Optional, Protocol, Sequence

from trilogy.agentbus.protocol import (
    BAD_INPUT,
    RESOURCE_CRASH,
    SERVICE_ERROR,
    SERVICE_QUEUED,
    SERVICE_REQUEST,
    SERVICE_RESULT,
    TIMEOUT,
    Agent,
    AgentClient,
    Connection,
    Message,
    ServiceFailure,
)
from trilogy.broker import (
    ADD_DOCUMENT,
    SEARCH_BY_KEYWORD,
    SEARCH_BY_TOPIC,
    BrokerDescriptor,
    BrokerError,
    BrokerStore,
    Service,
)
from trilogy.indexer import query_terms
from trilogy.soif import SoifError, parse

log = logging.getLogger(__name__)

SEARCH_LIMIT = 1000


class ResourceFailure(Exception):
    def __init__(self, reason: str, failure_class: str = RESOURCE_CRASH):
        super().__init__(reason)
        self.reason = reason
        self.failure_class = failure_class


class Resource(Protocol):
    def describe(self) -> BrokerDescriptor: ...

    def invoke(self, service: str, inputs: Sequence[str], user: str) -> Any: ...


QUEUED, RUNNING, DONE, FAILED = "queued", "running", "done", "failed"
_TRANSITIONS = {None: {QUEUED, RUNNING}, QUEUED: {RUNNING}, RUNNING: {DONE, FAILED}}


@dataclass(eq=False)
class ServiceTicket:
    request_id: str
    service: str
    inputs: tuple = ()
    user: str = ""
    state: Optional[str] = None
    queue_position: int = 0
    failure_reason: str = ""
    failure_class: str = ""
    conn: Optional[Connection] = None
    request: Optional[Message] = None

    def move(self, state: str) -> None:
        if state not in _TRANSITIONS.get(self.state, ()):
            raise RuntimeError(f"ticket {self.request_id}: illegal transition {self.state} -> {state}")
        self.state = state
        if state != QUEUED:
            self.queue_position = 0


class Scheduler:
    """Per-service instance limits with FIFO waiting queues.

    Not thread-safe by design: the owning agent calls it only from its inbox loop.
    """

    def __init__(self, limits: dict[str, int]):
        self.limits = dict(limits)
        self.running: dict[str, set] = {s: set() for s in limits}
        self.queues: dict[str, deque] = {s: deque() for s in limits}

    def submit(self, ticket: ServiceTicket) -> ServiceTicket:
        service = ticket.service
        if len(self.running[service]) < self.limits[service] and not self.queues[service]:
            ticket.move(RUNNING)
            self.running[service].add(ticket)
        else:
            ticket.move(QUEUED)
            self.queues[service].append(ticket)
            ticket.queue_position = len(self.queues[service])
        return ticket

    def finish(self, ticket: ServiceTicket) -> list[ServiceTicket]:
        """Release *ticket*'s instance; return tickets granted as a result, in grant order."""
        service = ticket.service
        self.running[service].discard(ticket)
        granted = []
        queue = self.queues[service]
        while queue and len(self.running[service]) < self.limits[service]:
            nxt = queue.popleft()
            nxt.move(RUNNING)
            self.running[service].add(nxt)
            granted.append(nxt)
        for pos, waiting in enumerate(queue, 1):
            waiting.queue_position = pos
        return granted

    def waiting(self, service: str) -> list[ServiceTicket]:
        return list(self.queues[service])


class ResourceAgent(Agent):
    """Generic wrapper around one resource."""

    role = "resource"

    def __init__(self, name: str, resource: Resource, listen: str = "127.0.0.1:0",
                 mediators: Sequence[str] = (), timeouts: Optional[dict[str, float]] = None):
        super().__init__(name, listen)
        self.resource = resource
        self.descriptor = resource.describe()
        problems = self.descriptor.problems()
        if problems:
            raise ValueError(f"bad descriptor: {problems[0]}")
        self.mediators = list(mediators)
        self.timeouts = dict(timeouts or {})
        self.scheduler = Scheduler({s.name: s.max_instances for s in self.descriptor.services})
        self.advertised: dict[str, str] = {}
        self._advertiser: Optional[threading.Thread] = None

    # -- advertisement ----------------------------------------------------------

    def advertise(self) -> dict[str, str]:
        """Send the descriptor to every configured mediator; returns mediator -> outcome."""
        outcome = {}
        for address in self.mediators:
            try:
                with AgentClient(address, self.name, timeout=5) as client:
                    client.advertise(self.descriptor.to_dict(), self.address)
                outcome[address] = "ok"
            except ServiceFailure as exc:
                outcome[address] = f"rejected: {exc.reason}"
                log.error("%s: mediator %s rejected advertisement: %s", self.name, address, exc.reason)
            except OSError as exc:
                outcome[address] = f"unreachable: {exc}"
        self.advertised = outcome
        return outcome

    def start_advertising(self, retry: float = 0.5, every: float = 60.0) -> None:
        """Advertise in the background, retrying unreachable mediators, re-advertising periodically."""

        def run():
            last_full = 0.0
            while self.running:
                pending = [m for m in self.mediators if self.advertised.get(m) != "ok"]
                if pending or time.monotonic() - last_full >= every:
                    self.advertise()
                    if all(v == "ok" for v in self.advertised.values()):
                        last_full = time.monotonic()
                time.sleep(retry)

        if self.mediators:
            self._advertiser = threading.Thread(target=run, name=f"{self.name}-advertiser", daemon=True)
            self._advertiser.start()

    # -- inbox ------------------------------------------------------------------

    def handle(self, msg: Message, conn: Connection) -> None:
        if msg.type != SERVICE_REQUEST:
            return super().handle(msg, conn)
        service = msg.body.get("service")
        inputs = msg.body.get("inputs", [])
        user = str(msg.body.get("user", msg.sender))
        spec = self.descriptor.service(service) if isinstance(service, str) else None
        if spec is None:
            return self._error(conn, msg, f"unknown service {service!r}", BAD_INPUT)
        if not isinstance(inputs, list) or not all(isinstance(i, str) for i in inputs):
            return self._error(conn, msg, "inputs must be a list of text values", BAD_INPUT)
        if len(inputs) != spec.input_arity:
            return self._error(
                conn, msg, f"service {service!r} takes {spec.input_arity} input(s), got {len(inputs)}", BAD_INPUT)

        ticket = ServiceTicket(msg.id, service, tuple(inputs), user, conn=conn, request=msg)
        self.scheduler.submit(ticket)
        if ticket.state == RUNNING:
            self._launch(ticket)
        else:
            self._queued(ticket)

    def _error(self, conn, msg, reason, failure_class):
        conn.send(msg.reply(SERVICE_ERROR, self.name, {"reason": reason, "failure_class": failure_class}))

    def _queued(self, ticket: ServiceTicket) -> None:
        ticket.conn.send(ticket.request.reply(SERVICE_QUEUED, self.name, {
            "service": ticket.service, "position": ticket.queue_position}))

    def _launch(self, ticket: ServiceTicket) -> None:
        def work():
            try:
                payload = self.resource.invoke(ticket.service, list(ticket.inputs), ticket.user)
                self.post(("done", ticket, payload, None))
            except ResourceFailure as exc:
                self.post(("done", ticket, None, (exc.reason, exc.failure_class)))
            except Exception as exc:  # a crashing resource must not take the agent down
                log.exception("%s: resource crashed on %s", self.name, ticket.service)
                self.post(("done", ticket, None, (str(exc) or type(exc).__name__, RESOURCE_CRASH)))

        threading.Thread(target=work, name=f"{self.name}-{ticket.service}", daemon=True).start()
        limit = self.timeouts.get(ticket.service)
        if limit:
            timer = threading.Timer(limit, self.post, args=(("timeout", ticket),))
            timer.daemon = True
            timer.start()

    def on_event(self, event) -> None:
        kind = event[0]
        if kind == "timeout":
            ticket = event[1]
            if ticket.state == RUNNING:
                ticket.move(FAILED)
                ticket.failure_reason = f"service {ticket.service!r} timed out after {self.timeouts[ticket.service]}s"
                ticket.failure_class = TIMEOUT
                self._error(ticket.conn, ticket.request, ticket.failure_reason, TIMEOUT)
            # the instance stays occupied until the resource really returns
            return
        if kind != "done":
            return
        _, ticket, payload, error = event
        if ticket.state == RUNNING:
            if error is None:
                ticket.move(DONE)
                ticket.conn.send(ticket.request.reply(SERVICE_RESULT, self.name, {
                    "service": ticket.service, "payload": payload}))
            else:
                ticket.move(FAILED)
                ticket.failure_reason, ticket.failure_class = error
                self._error(ticket.conn, ticket.request, ticket.failure_reason, ticket.failure_class)
        for granted in self.scheduler.finish(ticket):
            self._launch(granted)
        for waiting in self.scheduler.waiting(ticket.service):
            self._queued(waiting)


class MockExperiment:
    """Stand-in for laboratory equipment: sleeps, records instrumentation, optionally crashes."""

    SERVICE = "run-experiment"

    def __init__(self, name: str = "mock-experiment", max_instances: int = 1, duration: float = 0.05,
                 fail_reason: Optional[str] = None, failure_class: str = RESOURCE_CRASH,
                 topics: Sequence[str] = ("Simulation Models",)):
        self.name = name
        self.max_instances = max_instances
        self.duration = duration
        self.fail_reason = fail_reason
        self.failure_class = failure_class
        self.topics = tuple(topics)
        self._lock = threading.Lock()
        self.active = 0
        self.peak = 0
        self.grants: list[str] = []

    def describe(self) -> BrokerDescriptor:
        return BrokerDescriptor(self.name, self.topics, (), (Service(self.SERVICE, 1, self.max_instances),))

    def invoke(self, service: str, inputs: Sequence[str], user: str) -> Any:
        with self._lock:
            self.active += 1
            self.peak = max(self.peak, self.active)
            self.grants.append(inputs[0])
        try:
            time.sleep(self.duration)
        finally:
            with self._lock:
                self.active -= 1
        if self.fail_reason is not None:
            raise ResourceFailure(self.fail_reason, self.failure_class)
        return {"experiment": inputs[0], "user": user, "status": "completed"}


class BrokerResource:
    """Exposes a :class:`BrokerStore` as resource services."""

    def __init__(self, store: BrokerStore, data_dir=None):
        self.store = store
        self.data_dir = data_dir

    def describe(self) -> BrokerDescriptor:
        return self.store.describe()

    def _hits(self, hits) -> dict:
        return {
            "resource_name": self.store.settings.resource_name,
            "hits": [{"doc_id": h.doc_id, "url": h.url, "title": h.title, "score": h.score} for h in hits],
        }

    def invoke(self, service: str, inputs: Sequence[str], user: str) -> Any:
        try:
            if service == SEARCH_BY_KEYWORD:
                terms = query_terms(inputs[0], self.store.ontology)
                if not terms:
                    raise ResourceFailure("query has no searchable terms", BAD_INPUT)
                return self._hits(self.store.query_keywords(terms, SEARCH_LIMIT))
            if service == SEARCH_BY_TOPIC:
                concepts = [c.strip() for c in inputs[0].split("\n") if c.strip()]
                if not concepts:
                    raise ResourceFailure("no concepts given", BAD_INPUT)
                return self._hits(self.store.query_concepts(concepts, SEARCH_LIMIT))
            if service == ADD_DOCUMENT:
                try:
                    records = parse(base64.b64decode(inputs[0], validate=True))
                except (binascii.Error, SoifError) as exc:
                    raise ResourceFailure(f"cannot decode document: {exc}", BAD_INPUT) from None
                if len(records) != 1:
                    raise ResourceFailure(f"expected one SOIF record, got {len(records)}", BAD_INPUT)
                doc_id = self.store.add_document(records[0])
                if self.data_dir is not None:
                    self.store.persist_entry(self.data_dir, doc_id)
                entry = self.store.get(doc_id)
                return {"resource_name": self.store.settings.resource_name, "id": doc_id,
                        "url": entry.record.url, "vector": entry.vector}
        except BrokerError as exc:
            raise ResourceFailure(str(exc), BAD_INPUT) from None
        raise ResourceFailure(f"unknown service {service!r}", BAD_INPUT)
