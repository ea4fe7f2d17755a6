"""Line-delimited JSON messages over TCP, the agent inbox loop, and a blocking client.

Every message is one UTF-8 JSON object terminated by LF::

    {"id": "m1", "type": "ROUTE_REQUEST", "sender": "paa:fc",
     "body": {"kind": "topic", "value": "ATM General"}}

An :class:`Agent` accepts any number of connections, but handles the
messages from all of them one at a time on a single inbox thread.
"""

from __future__ import annotations

import collections
import itertools
import json
import logging
import os
import queue
import socket
import socketserver
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

log = logging.getLogger(__name__)

ADVERTISE = "ADVERTISE"
ROUTE_REQUEST = "ROUTE_REQUEST"
ROUTE_REPLY = "ROUTE_REPLY"
SERVICE_REQUEST = "SERVICE_REQUEST"
SERVICE_QUEUED = "SERVICE_QUEUED"
SERVICE_RESULT = "SERVICE_RESULT"
SERVICE_ERROR = "SERVICE_ERROR"
NOTIFY = "NOTIFY"
MESSAGE_TYPES = frozenset({
    ADVERTISE, ROUTE_REQUEST, ROUTE_REPLY, SERVICE_REQUEST,
    SERVICE_QUEUED, SERVICE_RESULT, SERVICE_ERROR, NOTIFY,
})

RESOURCE_CRASH = "resource_crash"
BAD_INPUT = "bad_input"
TIMEOUT = "timeout"
FAILURE_CLASSES = (RESOURCE_CRASH, BAD_INPUT, TIMEOUT)

MAX_LINE = 16 * 1024 * 1024

_counter = itertools.count(1)
_prefix = f"{os.getpid():x}-{id(_counter) & 0xFFFF:x}"


def new_id() -> str:
    return f"m{_prefix}-{next(_counter)}"


class ProtocolError(ValueError):
    pass


class ServiceFailure(Exception):
    """A SERVICE_ERROR reply; ``reason`` is the resource's text, unchanged."""

    def __init__(self, reason: str, failure_class: str = RESOURCE_CRASH):
        super().__init__(reason)
        self.reason = reason
        self.failure_class = failure_class


@dataclass
class Message:
    type: str
    sender: str
    body: dict = field(default_factory=dict)
    reply_to: Optional[str] = None
    id: str = field(default_factory=new_id)

    def to_json(self) -> dict:
        out = {"id": self.id, "type": self.type, "sender": self.sender}
        if self.reply_to is not None:
            out["reply_to"] = self.reply_to
        out["body"] = self.body
        return out

    def encode(self) -> bytes:
        return json.dumps(self.to_json(), ensure_ascii=False, separators=(",", ":")).encode("utf-8") + b"\n"

    @classmethod
    def decode(cls, line: bytes) -> "Message":
        try:
            obj = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, ValueError) as exc:
            raise ProtocolError(f"not a JSON line: {exc}") from None
        if not isinstance(obj, dict):
            raise ProtocolError("message must be a JSON object")
        for key in ("id", "type", "sender"):
            if not isinstance(obj.get(key), str) or not obj[key]:
                raise ProtocolError(f"missing or empty field {key!r}")
        if obj["type"] not in MESSAGE_TYPES:
            raise ProtocolError(f"unknown message type {obj['type']!r}")
        body = obj.get("body", {})
        if not isinstance(body, dict):
            raise ProtocolError("body must be an object")
        reply_to = obj.get("reply_to")
        if reply_to is not None and not isinstance(reply_to, str):
            raise ProtocolError("reply_to must be a string")
        return cls(obj["type"], obj["sender"], body, reply_to, obj["id"])

    def reply(self, type: str, sender: str, body: Optional[dict] = None) -> "Message":
        return Message(type, sender, body or {}, reply_to=self.id)


def parse_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"bad address {address!r} (expected host:port)")
    return host or "127.0.0.1", int(port)


class Connection:
    """Server side of one client connection; ``send`` is safe from any thread."""

    def __init__(self, sock: socket.socket, peer):
        self.sock = sock
        self.peer = peer
        self._lock = threading.Lock()
        self.closed = False

    def send(self, msg: Message) -> bool:
        if self.closed:
            return False
        try:
            with self._lock:
                self.sock.sendall(msg.encode())
            return True
        except OSError:
            self.closed = True
            return False

    def close(self):
        self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        agent: Agent = self.server.agent
        conn = Connection(self.request, self.client_address)
        agent._track(conn, True)
        try:
            while True:
                line = self.rfile.readline(MAX_LINE)
                if not line:
                    break
                if not line.strip():
                    continue
                try:
                    msg = Message.decode(line)
                except ProtocolError as exc:
                    conn.send(Message(SERVICE_ERROR, agent.name,
                                      {"reason": f"malformed message: {exc}", "failure_class": BAD_INPUT}))
                    continue
                agent.post((msg, conn))
        except OSError:
            pass
        finally:
            conn.closed = True
            agent._track(conn, False)


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 128  # the default of 5 drops SYNs under fan-out bursts

    def __init__(self, address, agent):
        self.agent = agent
        super().__init__(address, _Handler)


_STOP = object()


class Agent:
    """Base class: a TCP listener feeding one sequential inbox.

    Subclasses implement :meth:`handle` (wire messages) and optionally
    :meth:`on_event` (internal events posted with :meth:`post`).
    """

    role = "agent"

    def __init__(self, name: str, listen: str = "127.0.0.1:0"):
        self.name = name if ":" in name else f"{self.role}:{name}"
        self._inbox: queue.Queue = queue.Queue()
        self._server = _Server(parse_address(listen), self)
        self._threads: list[threading.Thread] = []
        self._conns: set[Connection] = set()
        self._conns_lock = threading.Lock()
        self._seen: collections.OrderedDict = collections.OrderedDict()
        self.running = False

    @property
    def address(self) -> str:
        host, port = self._server.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> "Agent":
        self.running = True
        for target, label in ((self._loop, "inbox"), (self._server.serve_forever, "listener")):
            t = threading.Thread(target=target, name=f"{self.name}-{label}", daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def stop(self) -> None:
        if not self.running:
            return
        self.running = False
        self._server.shutdown()
        self._server.server_close()
        with self._conns_lock:
            conns = list(self._conns)
        for c in conns:
            c.close()
        self._inbox.put(_STOP)
        for t in self._threads:
            t.join(timeout=5)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def post(self, item) -> None:
        self._inbox.put(item)

    def _track(self, conn: Connection, add: bool) -> None:
        with self._conns_lock:
            (self._conns.add if add else self._conns.discard)(conn)

    def _duplicate(self, msg: Message) -> bool:
        key = (msg.sender, msg.id)
        if key in self._seen:
            return True
        self._seen[key] = None
        if len(self._seen) > 10000:
            self._seen.popitem(last=False)
        return False

    def _loop(self) -> None:
        while True:
            item = self._inbox.get()
            if item is _STOP:
                return
            try:
                if isinstance(item, tuple) and len(item) == 2 and isinstance(item[0], Message):
                    msg, conn = item
                    if self._duplicate(msg):
                        log.debug("%s: dropping duplicate message %s from %s", self.name, msg.id, msg.sender)
                        continue
                    self.handle(msg, conn)
                else:
                    self.on_event(item)
            except Exception:
                log.exception("%s: handler failed", self.name)

    def handle(self, msg: Message, conn: Connection) -> None:
        conn.send(msg.reply(SERVICE_ERROR, self.name, {
            "reason": f"{self.name} does not accept {msg.type}", "failure_class": BAD_INPUT}))

    def on_event(self, event) -> None:
        pass


class AgentClient:
    """Blocking client: one TCP connection, requests answered in order."""

    def __init__(self, address: str, sender: str, timeout: Optional[float] = 10.0):
        self.address = address
        self.sender = sender
        self.sock = socket.create_connection(parse_address(address), timeout=timeout)
        self.sock.settimeout(timeout)
        self._rfile = self.sock.makefile("rb")

    def close(self):
        try:
            self._rfile.close()
        finally:
            self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def send(self, type: str, body: dict) -> Message:
        msg = Message(type, self.sender, body)
        self.sock.sendall(msg.encode())
        return msg

    def receive(self) -> Message:
        line = self._rfile.readline(MAX_LINE)
        if not line:
            raise ConnectionError(f"connection to {self.address} closed")
        return Message.decode(line)

    def replies(self, request: Message) -> Iterator[Message]:
        """Yield replies to *request*; unrelated messages are skipped."""
        while True:
            msg = self.receive()
            if msg.reply_to == request.id or (msg.reply_to is None and msg.type == SERVICE_ERROR):
                yield msg

    def request(self, type: str, body: dict) -> Message:
        """Send and return the first reply."""
        req = self.send(type, body)
        reply = next(self.replies(req))
        if reply.type == SERVICE_ERROR:
            raise ServiceFailure(reply.body.get("reason", "unknown error"),
                                 reply.body.get("failure_class", RESOURCE_CRASH))
        return reply

    def call_service(self, service: str, inputs: list, user: str,
                     on_queued: Optional[Callable[[int], None]] = None):
        """Request *service* and block until its result; raises :class:`ServiceFailure`."""
        req = self.send(SERVICE_REQUEST, {"service": service, "inputs": list(inputs), "user": user})
        for reply in self.replies(req):
            if reply.type == SERVICE_QUEUED:
                if on_queued is not None:
                    on_queued(int(reply.body.get("position", 0)))
            elif reply.type == SERVICE_RESULT:
                return reply.body.get("payload")
            elif reply.type == SERVICE_ERROR:
                raise ServiceFailure(reply.body.get("reason", "unknown error"),
                                     reply.body.get("failure_class", RESOURCE_CRASH))

    def route(self, kind: str, value: str) -> list[dict]:
        reply = self.request(ROUTE_REQUEST, {"kind": kind, "value": value})
        return list(reply.body.get("resources", []))

    def advertise(self, descriptor: dict, address: str) -> dict:
        return self.request(ADVERTISE, {"descriptor": descriptor, "address": address}).body
