import socket

import pytest

from conftest import ALTL, doc
from netkit import run_queue_scenario, wait_for
from trilogy.agentbus import (
    MediatorAgent,
    MockExperiment,
    PersonalAssistant,
    ProfileStore,
    ResourceAgent,
)
from trilogy.agentbus.mediator import Advertisement, RegistrationError, Registry
from trilogy.agentbus.paa import (
    MediatorUnreachable,
    NewDocument,
    PeerQuery,
    UserProfile,
    merge_hits,
    proactive_scan,
    similarity,
    update_profile,
)
from trilogy.agentbus.protocol import (
    NOTIFY,
    ROUTE_REPLY,
    ROUTE_REQUEST,
    SERVICE_ERROR,
    SERVICE_REQUEST,
    AgentClient,
    Message,
    ProtocolError,
    ServiceFailure,
    parse_address,
)
from trilogy.agentbus.resource import (
    QUEUED,
    RUNNING,
    BrokerResource,
    Scheduler,
    ServiceTicket,
)
from trilogy.broker import BrokerDescriptor, BrokerSettings, BrokerStore, Service
from trilogy.ingest import encode_soif_input

WDM = "Wavelength Division Multiplexing"


# -- protocol -----------------------------------------------------------------------

def test_message_round_trip():
    m = Message(NOTIFY, "paa:x", {"a": [1, "é"]}, reply_to="r1")
    assert Message.decode(m.encode()) == m
    assert m.encode().endswith(b"\n") and m.encode().count(b"\n") == 1


@pytest.mark.parametrize("line", [
    b"not json", b"[]", b'{"id":"1","type":"BOGUS","sender":"a"}',
    b'{"id":"1","type":"NOTIFY"}', b'{"id":"1","type":"NOTIFY","sender":"a","body":[]}',
    b"\xff\xfe",
])
def test_message_decode_errors(line):
    with pytest.raises(ProtocolError):
        Message.decode(line)


def test_parse_address():
    assert parse_address("h:1") == ("h", 1)
    assert parse_address(":7700") == ("127.0.0.1", 7700)
    with pytest.raises(ValueError):
        parse_address("nohost")


def test_malformed_line_gets_bad_input_and_connection_survives(seed):
    with MediatorAgent("m", seed) as med:
        with socket.create_connection(parse_address(med.address), timeout=5) as s:
            f = s.makefile("rb")
            s.sendall(b"garbage\n")
            err = Message.decode(f.readline())
            assert err.type == SERVICE_ERROR and err.body["failure_class"] == "bad_input"
            req = Message(ROUTE_REQUEST, "paa:t", {"kind": "topic", "value": "ATM General"})
            s.sendall(req.encode())
            reply = Message.decode(f.readline())
            assert reply.type == ROUTE_REPLY and reply.reply_to == req.id


def test_duplicate_messages_dropped(seed):
    with MediatorAgent("m", seed) as med, AgentClient(med.address, "paa:t") as c:
        msg = Message(ROUTE_REQUEST, "paa:t", {"kind": "topic", "value": "X"})
        c.sock.sendall(msg.encode() + msg.encode())
        c.sock.sendall(Message(ROUTE_REQUEST, "paa:t", {"kind": "topic", "value": "Y"}).encode())
        first, second = c.receive(), c.receive()
        assert first.reply_to == msg.id and second.reply_to != msg.id


def test_unsupported_message_type(seed):
    with MediatorAgent("m", seed) as med, AgentClient(med.address, "paa:t") as c:
        with pytest.raises(ServiceFailure) as err:
            c.request(SERVICE_REQUEST, {"service": "x", "inputs": []})
        assert err.value.failure_class == "bad_input"


# -- mediator -----------------------------------------------------------------------

def ad(name, topics=(), keywords=(), address="127.0.0.1:1"):
    return Advertisement(BrokerDescriptor(name, topics, keywords, (Service("s", 1),)), address)


def test_registry_topic_route_uses_hierarchy(seed):
    reg = Registry()
    reg.register(ad("wireless", ["Wireless ATM"]))
    reg.register(ad("sdh", ["SDH Networking and Components"]))
    assert reg.route("ATM General", seed, "topic") == ["wireless"]
    assert reg.route("atm general", seed, "topic") == ["wireless"]
    assert reg.route("SDH General", seed, "topic") == ["sdh"]
    assert reg.route("Wireless ATM", seed, "topic") == ["wireless"]
    assert reg.route("Optical Networks", seed, "topic") == []
    # a topic not in the ontology still matches literally
    reg.register(ad("odd", ["Free Topic"]))
    assert reg.route("free topic", seed, "topic") == ["odd"]


def test_registry_keyword_and_resource_routes(seed):
    reg = Registry()
    reg.register(ad("a", ["Optical Networks"], ["WDM", "dense  wdm"]))
    assert reg.route("wdm", seed, "keyword") == ["a"]
    assert reg.route("Dense WDM", seed, "keyword") == ["a"]
    assert reg.route("dense", seed, "keyword") == []
    assert reg.route("a", seed, "resource") == ["a"]
    assert reg.route("Optical Networks", seed) == ["a"]
    with pytest.raises(ValueError):
        reg.route("x", seed, "bogus")


def test_registry_identity_rules():
    reg = Registry()
    reg.register(ad("a", ["X"], address="h:1"))
    reg.register(ad("a", ["Y"], address="h:1"))
    assert reg.get("a").descriptor.topics == ("Y",)
    with pytest.raises(RegistrationError, match="already registered"):
        reg.register(ad("a", ["X"], address="h:2"))
    with pytest.raises(RegistrationError):
        reg.register(Advertisement(BrokerDescriptor(""), "h:3"))


def test_mediator_over_tcp(seed):
    with MediatorAgent("m", seed) as med, AgentClient(med.address, "resource:t") as c:
        desc = ad("wireless", ["Wireless ATM"]).descriptor.to_dict()
        assert c.advertise(desc, "127.0.0.1:9")["registered"] == "wireless"
        [res] = c.route("topic", "ATM General")
        assert res["resource_name"] == "wireless" and res["address"] == "127.0.0.1:9"
        assert c.route("topic", "SDH General") == []
        with pytest.raises(ServiceFailure):
            c.advertise(desc, "127.0.0.1:10")
        with pytest.raises(ServiceFailure):
            c.request(ROUTE_REQUEST, {"kind": "nope", "value": "x"})


# -- scheduler ----------------------------------------------------------------------

def test_scheduler_fifo_positions():
    s = Scheduler({"x": 2})
    t = [ServiceTicket(str(i), "x") for i in range(5)]
    for tk in t:
        s.submit(tk)
    assert [tk.state for tk in t] == [RUNNING, RUNNING, QUEUED, QUEUED, QUEUED]
    assert [tk.queue_position for tk in t[2:]] == [1, 2, 3]
    assert s.finish(t[0]) == [t[2]]
    assert [tk.queue_position for tk in t[3:]] == [1, 2]
    with pytest.raises(RuntimeError):
        t[2].move(QUEUED)


@pytest.mark.parametrize("limit", [1, 3])
def test_resource_agent_limits(limit):
    mock = MockExperiment(max_instances=limit, duration=0.08)
    with ResourceAgent("lab", mock) as agent:
        outcomes = run_queue_scenario(agent, mock, n=7)
    assert mock.peak == limit
    assert mock.grants == [f"job{i}" for i in range(7)]
    for i, (positions, final) in enumerate(outcomes):
        assert final.body["payload"]["experiment"] == f"job{i}"
        assert positions == sorted(positions, reverse=True)
        assert len(set(positions)) == len(positions)
        if positions:
            assert positions[0] == i - limit + 1 and positions[-1] == 1


def test_resource_agent_bad_input_not_queued():
    mock = MockExperiment()
    with ResourceAgent("lab", mock) as agent, AgentClient(agent.address, "paa:t") as c:
        for service, inputs in (("nope", ["x"]), ("run-experiment", []), ("run-experiment", [1])):
            with pytest.raises(ServiceFailure) as err:
                c.call_service(service, inputs, "u")
            assert err.value.failure_class == "bad_input"
    assert mock.grants == []


def test_resource_agent_failure_reason():
    mock = MockExperiment(fail_reason="laser misaligned: bench 4", duration=0.01)
    with ResourceAgent("lab", mock) as agent, AgentClient(agent.address, "paa:t") as c:
        with pytest.raises(ServiceFailure) as err:
            c.call_service("run-experiment", ["x"], "u")
    assert err.value.reason == "laser misaligned: bench 4"
    assert err.value.failure_class == "resource_crash"


def test_resource_agent_timeout_holds_slot():
    mock = MockExperiment(duration=0.4)
    with ResourceAgent("lab", mock, timeouts={"run-experiment": 0.05}) as agent:
        with AgentClient(agent.address, "paa:a") as a, AgentClient(agent.address, "paa:b") as b:
            with pytest.raises(ServiceFailure) as err:
                a.call_service("run-experiment", ["slow"], "u")
            assert err.value.failure_class == "timeout"
            queued = []
            with pytest.raises(ServiceFailure):
                b.call_service("run-experiment", ["next"], "u", on_queued=queued.append)
            # b waited for the slow job to really return, not just for a's timeout
            assert queued == [1]
    assert mock.peak == 1 and mock.grants == ["slow", "next"]


def test_resource_agent_advertises(seed):
    with MediatorAgent("m", seed) as med:
        mock = MockExperiment(topics=("Simulation Models",))
        with ResourceAgent("lab", mock, mediators=[med.address, "127.0.0.1:1"]) as agent:
            outcome = agent.advertise()
            assert outcome[med.address] == "ok"
            assert outcome["127.0.0.1:1"].startswith("unreachable")
            assert med.registry.route("Simulation Models", seed, "topic") == ["mock-experiment"]


# -- broker resource ----------------------------------------------------------------

@pytest.fixture
def broker_agent(seed, tmp_path):
    store = BrokerStore(seed, BrokerSettings("optics", (WDM,), ("wdm",)))
    store.add_document(doc("file:///a", "WDM rings", "wdm"))
    with ResourceAgent("broker:optics", BrokerResource(store, tmp_path)) as agent:
        yield agent, store, tmp_path


def test_broker_resource_services(broker_agent):
    agent, store, data_dir = broker_agent
    with AgentClient(agent.address, "paa:t") as c:
        out = c.call_service("search-by-topic", [WDM], "u")
        assert out["hits"][0]["url"] == "file:///a"
        out = c.call_service("search-by-keyword", ["WDM rings"], "u")
        assert out["hits"][0]["score"] == 1.0
        added = c.call_service("add-document", [encode_soif_input(doc("file:///new", "aal"))], "u")
        assert added["id"] == 2 and ALTL in added["vector"]
        assert (data_dir / "store" / "2.soif").exists()
        with pytest.raises(ServiceFailure, match="duplicate url"):
            c.call_service("add-document", [encode_soif_input(doc("file:///new"))], "u")
        with pytest.raises(ServiceFailure, match="cannot decode"):
            c.call_service("add-document", ["!!"], "u")
        with pytest.raises(ServiceFailure):
            c.call_service("search-by-keyword", ["  "], "u")


# -- personal assistant -------------------------------------------------------------

def test_update_profile_blend():
    p = update_profile(UserProfile("u", {"A": 1.0}), {"B": 1.0}, 0.8)
    assert p.interests == pytest.approx({"A": 0.8, "B": 0.2})
    assert update_profile(p, {}).interests == p.interests
    assert sum(update_profile(p, {"A": 0.5, "C": 0.5}).interests.values()) == pytest.approx(1.0)


def test_similarity():
    assert similarity({"A": 1}, {"A": 1}) == 1.0
    assert similarity({"A": 1}, {"B": 1}) == 0.0
    assert similarity({}, {"A": 1}) == 0.0
    assert similarity({"A": 0.5, "B": 0.5}, {"A": 1}) == pytest.approx(2 ** -0.5)


def test_proactive_scan_excludes_originator():
    profiles = [UserProfile("alice", {"A": 1.0}), UserProfile("bob", {"A": 1.0})]
    notes = proactive_scan(PeerQuery("alice", {"A": 1.0}), profiles)
    assert [n.body["user"] for n in notes] == ["bob"]
    assert notes[0].body["trigger"] == "alice"
    notes = proactive_scan(NewDocument("u", {"A": 1.0}), profiles, threshold=1.0)
    assert len(notes) == 2 and all(n.type == NOTIFY for n in notes)


def test_merge_hits():
    merged = merge_hits([
        ("r1", [{"url": "a", "score": 0.5, "title": "A"}, {"url": "b", "score": 0.9}]),
        ("r2", [{"url": "a", "score": 0.7, "title": "A"}, {"url": "c", "score": 0.9}]),
    ])
    assert [(h.url, h.score, h.resource) for h in merged] == [
        ("b", 0.9, "r1"), ("c", 0.9, "r2"), ("a", 0.7, "r2")]
    assert len(merge_hits([("r", [{"url": "x", "score": 1}] * 3)], limit=1)) == 1


def test_profile_store_persistence(tmp_path):
    path = tmp_path / "profiles.json"
    ps = ProfileStore(path)
    ps.put(UserProfile("u", {"A": 1.0}))
    ps.deliver([Message(NOTIFY, "paa:x", {"user": "u", "event": "new-document"})])
    ps.save()
    again = ProfileStore(path)
    assert again.get("u").interests == {"A": 1.0}
    assert len(again.take_notifications("u")) == 1
    assert again.take_notifications("u") == []


def test_paa_query_end_to_end(seed, broker_agent, tmp_path):
    agent, store, _ = broker_agent
    with MediatorAgent("m", seed) as med:
        agent.mediators = [med.address]
        agent.advertise()
        paa = PersonalAssistant(seed, [med.address], ProfileStore(tmp_path / "p.json"))
        paa.profiles.put(UserProfile("peer", {WDM: 1.0}))
        result = paa.query("alice", "wdm rings")
        assert [h.url for h in result.hits] == ["file:///a"]
        assert result.resources == ["optics"]
        assert not result.partial
        assert paa.profiles.get("alice").interests == {WDM: pytest.approx(1.0)}
        assert len(paa.profiles.get("alice").history) == 1
        assert paa.profiles.take_notifications("peer")[0]["body"]["trigger"] == "alice"


def test_paa_request_service_relays_failure(seed):
    mock = MockExperiment(fail_reason="power supply tripped", duration=0.01)
    with MediatorAgent("m", seed) as med, ResourceAgent("lab", mock, mediators=[med.address]) as ra:
        ra.advertise()
        paa = PersonalAssistant(seed, [med.address])
        with pytest.raises(ServiceFailure) as err:
            paa.request_service("mock-experiment", "run-experiment", ["x"], "alice")
        assert err.value.reason == "power supply tripped"
        with pytest.raises(ServiceFailure, match="no mediator knows"):
            paa.request_service("ghost", "run-experiment", ["x"], "alice")


def test_paa_without_reachable_mediator(seed):
    with pytest.raises(MediatorUnreachable):
        PersonalAssistant(seed, ["127.0.0.1:1"], timeout=1).query("u", "wdm")
    with pytest.raises(MediatorUnreachable):
        PersonalAssistant(seed, []).query("u", "wdm")


def test_paa_warns_on_dead_broker(seed):
    with MediatorAgent("m", seed) as med:
        with AgentClient(med.address, "resource:x") as c:
            desc = BrokerDescriptor("dead", [WDM], (), (Service("search-by-topic", 1),))
            c.advertise(desc.to_dict(), "127.0.0.1:1")
        paa = PersonalAssistant(seed, [med.address], timeout=2)
        result = paa.query("u", "wdm")
        assert result.hits == [] and result.partial
        assert "dead unreachable" in result.warnings[0]
