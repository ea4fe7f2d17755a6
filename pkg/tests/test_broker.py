import json
import threading

import pytest

from conftest import ALTL, doc
from trilogy.broker import (
    BrokerDescriptor,
    BrokerError,
    BrokerSettings,
    BrokerStore,
    Service,
)
from trilogy.soif import SoifRecord

WDM = "Wavelength Division Multiplexing"


@pytest.fixture
def store(seed):
    s = BrokerStore(seed, BrokerSettings("optics", (WDM,), ("wdm",), max_instances=2))
    s.add_document(doc("file:///a", "WDM rings", "wdm", "dense wdm systems"))
    s.add_document(doc("file:///b", "AAL and WDM", "aal", "wdm"))
    s.add_document(doc("file:///c", "connection admission control", "", "policing"))
    return s


def test_ids_are_sequential(store):
    assert [e.id for e in store.entries()] == [1, 2, 3]


def test_duplicate_url_rejected(store):
    with pytest.raises(BrokerError, match="duplicate url"):
        store.add_document(doc("file:///a"))


def test_invalid_record_rejected(store):
    with pytest.raises(BrokerError, match="invalid record"):
        store.add_document(SoifRecord("FILE", "bad\nurl"))


def test_remove_document(store):
    store.remove_document(1)
    assert [h.doc_id for h in store.query_concepts([WDM])] == [2]
    assert store.query_keywords(["rings"]) == []
    with pytest.raises(BrokerError):
        store.remove_document(1)
    # url is free again, id is not reused
    assert store.add_document(doc("file:///a", "wdm")) == 4


def test_query_concepts(store):
    hits = store.query_concepts([WDM, ALTL])
    assert [h.url for h in hits] == ["file:///a", "file:///b"]
    assert hits[0].score == 1.0
    # b: aal x2 (2*23) and wdm x2 (2*15) => ALTL 40/76 beats WDM 30/76
    assert hits[1].score == pytest.approx(40 / 76, abs=1e-12)
    assert store.query_concepts(["wavelength division multiplexing"])[0].url == "file:///a"
    assert store.query_concepts(["Unknown"]) == []


def test_query_keywords(store):
    hits = store.query_keywords(["wdm", "rings"])
    assert [(h.url, h.score) for h in hits] == [("file:///a", 1.0), ("file:///b", 0.5)]
    hits = store.query_keywords(["admission control"])
    assert [h.url for h in hits] == ["file:///c"]
    assert store.query_keywords(["control admission"]) == []


def test_query_limit_and_errors(store):
    assert len(store.query_concepts([WDM], limit=1)) == 1
    with pytest.raises(BrokerError):
        store.query_keywords([])
    with pytest.raises(BrokerError):
        store.query_concepts([])
    with pytest.raises(BrokerError):
        store.query_concepts([WDM], limit=0)


def test_describe(store):
    d = store.describe()
    assert d.resource_name == "optics"
    assert [s.name for s in d.services] == ["search-by-keyword", "search-by-topic", "add-document"]
    assert d.service("search-by-topic").max_instances == 2
    assert BrokerDescriptor.from_dict(json.loads(json.dumps(d.to_dict()))) == d
    assert d.problems() == []


def test_descriptor_problems():
    d = BrokerDescriptor("", services=(Service("s", -1, 0), Service("s", 1)))
    assert len(d.problems()) == 4
    with pytest.raises(ValueError):
        BrokerDescriptor.from_dict({"topics": []})


@pytest.mark.parametrize("kwargs", [
    dict(resource_name="", topics=("A",)),
    dict(resource_name="x", topics=()),
    dict(resource_name="x", topics=("A",), max_instances=0),
])
def test_settings_validation(kwargs):
    with pytest.raises(BrokerError):
        BrokerSettings(**kwargs)


def test_save_load_round_trip(store, seed, tmp_path):
    store.save(tmp_path)
    loaded = BrokerStore.load(tmp_path, seed, store.settings)
    assert [e.record for e in loaded.entries()] == [e.record for e in store.entries()]
    assert loaded.index == store.index
    assert loaded.store_digest() == store.store_digest()
    idx = json.loads((tmp_path / "index" / "concepts.idx").read_text())
    assert idx["ontology"] == seed.fingerprint()
    assert loaded.add_document(doc("file:///d")) == 4


def test_load_ignores_tampered_index(store, seed, tmp_path):
    store.save(tmp_path)
    (tmp_path / "index" / "concepts.idx").write_text('{"postings": {"X": [[1, 1.0]]}}')
    loaded = BrokerStore.load(tmp_path, seed)
    assert loaded.index == store.index


def test_load_skips_corrupt_files(store, seed, tmp_path):
    store.save(tmp_path)
    (tmp_path / "store" / "2.soif").write_bytes(b"@FILE { x\ntitle{99}:\tshort\n}\n")
    (tmp_path / "store" / "junk.soif").write_bytes(b"")
    loaded = BrokerStore.load(tmp_path, seed)
    assert [e.id for e in loaded.entries()] == [1, 3]
    assert len(loaded.load_errors) == 2


def test_load_missing_dir(seed, tmp_path):
    with pytest.raises(OSError):
        BrokerStore.load(tmp_path / "nope", seed)


def test_failure_counts_persist(store, seed, tmp_path):
    with store.write_lock():
        store.publish([e.failed() if e.id == 2 else e for e in store.entries()])
    store.save(tmp_path)
    assert BrokerStore.load(tmp_path, seed).get(2).failure_count == 1


def test_set_ontology_reindexes(store, seed):
    from trilogy.ontology import set_link
    store.set_ontology(set_link(seed, "policing", "ATM Bandwidth allocation", 5))
    assert [h.url for h in store.query_concepts(["ATM Bandwidth allocation"])] == ["file:///c"]
    assert store.get(3).vector["ATM Bandwidth allocation"] == 1.0


def test_concurrent_reads_during_writes(seed):
    s = BrokerStore(seed)
    stop = threading.Event()
    errors = []

    def reader():
        while not stop.is_set():
            try:
                hits = s.query_concepts([WDM], limit=1000)
                n = len(hits)
                assert n == len({h.url for h in hits})
            except Exception as exc:  # pragma: no cover
                errors.append(exc)

    threads = [threading.Thread(target=reader) for _ in range(4)]
    for t in threads:
        t.start()
    for i in range(300):
        s.add_document(doc(f"file:///{i}", "wdm"))
        if i % 3 == 0:
            s.remove_document(i + 1)
    stop.set()
    for t in threads:
        t.join()
    assert not errors
    assert len(s.query_concepts([WDM], limit=1000)) == 200
