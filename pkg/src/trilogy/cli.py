"""Command line entry point: daemons plus ingest, query, ontology and maintenance commands.

Exit status: 0 success, 1 user error, 2 system error.
"""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading
from pathlib import Path
from typing import Optional

from trilogy import indexer, ingest
from trilogy.agentbus.mediator import MediatorAgent
from trilogy.agentbus.paa import MediatorUnreachable, PersonalAssistant, ProfileStore
from trilogy.agentbus.protocol import ServiceFailure
from trilogy.agentbus.resource import BrokerResource, MockExperiment, ResourceAgent
from trilogy.broker import BrokerError, BrokerSettings, BrokerStore
from trilogy.config import DEFAULT_MEDIATOR, Config, ConfigError, load_config
from trilogy.ontology import (
    OntologyError,
    add_concept,
    load_ontology_dir,
    save_ontology_dir,
    seed_ontology,
    set_link,
    validate,
)

log = logging.getLogger("trilogy")

USER_ERROR = 1
SYSTEM_ERROR = 2


class UserError(Exception):
    pass


# -- helpers ------------------------------------------------------------------

def _config(args, **overrides) -> Config:
    data_dir = getattr(args, "data_dir", None)
    fallback = Path(data_dir) / "broker.conf" if data_dir else None
    flags = {
        "data_dir": data_dir,
        "listen": getattr(args, "listen", None),
        "mediators": getattr(args, "mediator", None),
        "resource_name": getattr(args, "resource_name", None),
        "topics": getattr(args, "topic", None),
        "keywords": getattr(args, "keyword", None),
        "max_instances": getattr(args, "max_instances", None),
        "refresh_interval": getattr(args, "refresh_interval", None),
        "ontology": getattr(args, "ontology", None),
    }
    flags.update(overrides)
    return load_config(args.config, flags, fallback)


def _ontology(cfg: Config):
    if cfg.ontology:
        return load_ontology_dir(cfg.ontology)
    local = Path(cfg.data_dir) / "ontology"
    if (local / "links.tsv").is_file():
        return load_ontology_dir(local)
    return seed_ontology()


def _writable_ontology_dir(cfg: Config) -> Path:
    if cfg.ontology:
        return Path(cfg.ontology)
    local = Path(cfg.data_dir) / "ontology"
    if not (local / "links.tsv").is_file():
        save_ontology_dir(seed_ontology(), local)
    return local


def _wait_for_interrupt(stop: threading.Event) -> None:
    def on_signal(signum, frame):
        stop.set()

    signal.signal(signal.SIGINT, on_signal)
    signal.signal(signal.SIGTERM, on_signal)
    while not stop.wait(0.2):
        pass


def _announce(agent) -> None:
    print(f"listening {agent.address} {agent.name}", flush=True)


# -- serve commands -------------------------------------------------------------

def cmd_mediator_serve(args) -> int:
    cfg = _config(args)
    ontology = _ontology(cfg)
    agent = MediatorAgent(args.name, ontology, cfg.listen or DEFAULT_MEDIATOR).start()
    _announce(agent)
    try:
        _wait_for_interrupt(threading.Event())
    finally:
        agent.stop()
    return 0


def cmd_broker_serve(args) -> int:
    cfg = _config(args)
    ontology = _ontology(cfg)
    try:
        settings = BrokerSettings(cfg.resource_name, tuple(cfg.topics), tuple(cfg.keywords), cfg.max_instances)
    except BrokerError as exc:
        raise UserError(str(exc)) from None
    data_dir = Path(cfg.data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    store = BrokerStore.load(data_dir, ontology, settings)
    for path, problem in store.load_errors:
        print(f"warning: {path}: {problem}", file=sys.stderr)
    agent = ResourceAgent(f"broker:{settings.resource_name}", BrokerResource(store, data_dir),
                          cfg.listen or "127.0.0.1:0", cfg.mediators).start()
    agent.start_advertising()
    _announce(agent)

    stop = threading.Event()

    def maintain():
        while not stop.wait(cfg.refresh_interval):
            report = indexer.refresh(store, store.ontology, indexer.local_file_probe)
            store.save(data_dir)
            log.info("refresh: %s", report)

    if cfg.refresh_interval > 0:
        threading.Thread(target=maintain, name="refresh", daemon=True).start()
    try:
        _wait_for_interrupt(stop)
    finally:
        stop.set()
        agent.stop()
        store.save(data_dir)
    return 0


def cmd_resource_serve(args) -> int:
    if not args.mock_experiment:
        raise UserError("only --mock-experiment resources can be served from the command line")
    cfg = _config(args)
    mock = MockExperiment(cfg.resource_name or "mock-experiment", cfg.max_instances, args.duration,
                          args.fail_reason, args.failure_class, cfg.topics or ("Simulation Models",))
    agent = ResourceAgent(f"resource:{mock.name}", mock, cfg.listen or "127.0.0.1:0", cfg.mediators,
                          timeouts={mock.SERVICE: args.timeout} if args.timeout else None).start()
    agent.start_advertising()
    _announce(agent)
    try:
        _wait_for_interrupt(threading.Event())
    finally:
        agent.stop()
    return 0


# -- client commands ------------------------------------------------------------

def _profiles(cfg: Config) -> ProfileStore:
    return ProfileStore(Path(cfg.data_dir) / "profiles.json")


def _broker_address(args, cfg: Config) -> str:
    address = args.broker or cfg.listen
    if not address:
        raise UserError("no broker address (use --broker or set listen in the config)")
    return address


def _submit(record, address: str, cfg: Config, user: str) -> str:
    payload = ingest.send_record(record, address, f"paa:{user}")
    assistant = PersonalAssistant(_ontology(cfg), cfg.mediators, _profiles(cfg),
                                  cfg.profile_blend, cfg.notify_threshold)
    assistant.document_added(payload["url"], payload.get("vector", {}), origin=user)
    return f"{payload['resource_name']}\t{payload['id']}\t{payload['url']}"


def _prompt_fields(kind) -> dict:
    fields = {}
    for spec in ingest.required_fields(kind):
        label = f"{spec.name}{' (optional)' if spec.optional else ''}: "
        value = input(label)
        if value.strip():
            fields[spec.name] = value
    return fields


def cmd_ingest_add(args) -> int:
    cfg = _config(args)
    if args.interactive:
        fields = _prompt_fields(args.kind)
    else:
        fields = {}
        for item in args.field or ():
            name, sep, value = item.partition("=")
            if not sep:
                raise UserError(f"--field expects name=value, got {item!r}")
            fields[name.strip()] = value
    record = ingest.build_record(args.kind, fields)
    print(_submit(record, _broker_address(args, cfg), cfg, args.user))
    return 0


def cmd_ingest_batch(args) -> int:
    cfg = _config(args)
    address = _broker_address(args, cfg)
    failures = 0
    with open(args.file, encoding="utf-8") as fh:
        for lineno, item in ingest.read_batch(fh):
            if isinstance(item, ingest.RecordError):
                failures += 1
                print(f"line {lineno}: {item}", file=sys.stderr)
                continue
            try:
                print(_submit(item, address, cfg, args.user))
            except ingest.SubmitError as exc:
                if exc.network:
                    raise
                failures += 1
                print(f"line {lineno}: {exc.reason}", file=sys.stderr)
    return USER_ERROR if failures else 0


def cmd_query(args) -> int:
    cfg = _config(args)
    assistant = PersonalAssistant(_ontology(cfg), cfg.mediators, _profiles(cfg),
                                  cfg.profile_blend, cfg.notify_threshold, name=args.user)
    result = assistant.query(args.user, args.text, args.limit)
    for hit in result.hits:
        title = " ".join(hit.title.split())
        print(f"{hit.score:.6f}\t{hit.resource}\t{hit.url}\t{title}")
    for warning in result.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    for note in assistant.profiles.take_notifications(args.user):
        body = note["body"]
        print(f"notify\t{body['event']}\t{body['trigger']}\t{body['similarity']:.6f}", file=sys.stderr)
    assistant.profiles.save()
    return 0


def cmd_ontology(args) -> int:
    cfg = _config(args)
    if args.action == "validate":
        if cfg.ontology or (Path(cfg.data_dir) / "ontology" / "links.tsv").is_file():
            onto = load_ontology_dir(cfg.ontology or Path(cfg.data_dir) / "ontology", check=False)
        else:
            onto = seed_ontology()
        problems = validate(onto)
        for problem in problems:
            print(problem)
        return USER_ERROR if problems else 0
    if args.action == "list":
        onto = _ontology(cfg)
        for c in onto.concepts:
            print(f"concept\t{c.name}\t{c.parent or ''}")
        for ln in onto.links:
            print(f"link\t{ln.keyword}\t{ln.concept}\t{ln.weight}")
        return 0
    directory = _writable_ontology_dir(cfg)
    onto = load_ontology_dir(directory)
    if args.action == "add-concept":
        onto = add_concept(onto, args.name, args.parent)
    else:
        try:
            weight = int(args.weight)
        except ValueError:
            raise UserError(f"weight must be an integer, got {args.weight!r}") from None
        onto = set_link(onto, args.keyword, args.concept, weight)
    save_ontology_dir(onto, directory)
    print(f"ok\t{directory}")
    return 0


def cmd_index_refresh(args) -> int:
    cfg = _config(args)
    data_dir = Path(cfg.data_dir)
    if not data_dir.is_dir():
        raise OSError(f"data directory {data_dir} does not exist")
    store = BrokerStore.load(data_dir, _ontology(cfg))
    for path, problem in store.load_errors:
        print(f"warning: {path}: {problem}", file=sys.stderr)
    report = indexer.refresh(store, store.ontology, indexer.local_file_probe)
    store.save(data_dir)
    print(f"refreshed={report.refreshed}\tremoved={report.removed}\t"
          f"failed_probe={report.failed_probe}\telapsed_ms={report.elapsed:.1f}")
    return 0


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file (default: $TRILOGY_CONFIG)")
    common.add_argument("--data-dir")
    common.add_argument("--ontology", help="directory holding hierarchy.tsv and links.tsv")
    common.add_argument("--mediator", action="append", help="mediator host:port (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    daemon = argparse.ArgumentParser(add_help=False)
    daemon.add_argument("--listen", help="host:port to listen on")
    daemon.add_argument("--resource-name")
    daemon.add_argument("--topic", action="append")
    daemon.add_argument("--max-instances", type=int)

    parser = argparse.ArgumentParser(prog="trilogy", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    broker = sub.add_parser("broker").add_subparsers(dest="action", required=True)
    p = broker.add_parser("serve", parents=[common, daemon])
    p.add_argument("--keyword", action="append")
    p.add_argument("--refresh-interval")
    p.set_defaults(func=cmd_broker_serve)

    mediator = sub.add_parser("mediator").add_subparsers(dest="action", required=True)
    p = mediator.add_parser("serve", parents=[common])
    p.add_argument("--listen")
    p.add_argument("--name", default="yellow-pages")
    p.set_defaults(func=cmd_mediator_serve)

    resource = sub.add_parser("resource").add_subparsers(dest="action", required=True)
    p = resource.add_parser("serve", parents=[common, daemon])
    p.add_argument("--mock-experiment", action="store_true")
    p.add_argument("--duration", type=float, default=1.0, help="seconds per experiment run")
    p.add_argument("--fail-reason", help="make every run fail with this reason")
    p.add_argument("--failure-class", default="resource_crash",
                   choices=("resource_crash", "bad_input", "timeout"))
    p.add_argument("--timeout", type=float)
    p.set_defaults(func=cmd_resource_serve)

    ing = sub.add_parser("ingest").add_subparsers(dest="action", required=True)
    p = ing.add_parser("add", parents=[common])
    p.add_argument("--kind", required=True, choices=[k.value for k in ingest.DocKind])
    p.add_argument("--field", action="append", metavar="NAME=VALUE")
    p.add_argument("--interactive", action="store_true")
    p.add_argument("--broker", help="broker host:port")
    p.add_argument("--user", default="anonymous")
    p.set_defaults(func=cmd_ingest_add)
    p = ing.add_parser("batch", parents=[common])
    p.add_argument("file")
    p.add_argument("--broker")
    p.add_argument("--user", default="anonymous")
    p.set_defaults(func=cmd_ingest_batch)

    p = sub.add_parser("query", parents=[common])
    p.add_argument("text")
    p.add_argument("--user", required=True)
    p.add_argument("--limit", type=int, default=20)
    p.set_defaults(func=cmd_query)

    onto = sub.add_parser("ontology").add_subparsers(dest="action", required=True)
    for action in ("list", "validate"):
        onto.add_parser(action, parents=[common]).set_defaults(func=cmd_ontology)
    p = onto.add_parser("add-concept", parents=[common])
    p.add_argument("name")
    p.add_argument("--parent")
    p.set_defaults(func=cmd_ontology)
    p = onto.add_parser("link", parents=[common])
    p.add_argument("keyword")
    p.add_argument("concept")
    p.add_argument("weight")
    p.set_defaults(func=cmd_ontology)

    index = sub.add_parser("index").add_subparsers(dest="action", required=True)
    index.add_parser("refresh", parents=[common]).set_defaults(func=cmd_index_refresh)
    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USER_ERROR if exc.code else 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UserError, ConfigError, OntologyError, BrokerError, ingest.RecordError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USER_ERROR
    except ingest.SubmitError as exc:
        print(f"error: {exc.reason}", file=sys.stderr)
        return SYSTEM_ERROR if exc.network else USER_ERROR
    except ServiceFailure as exc:
        print(f"error: {exc.reason}", file=sys.stderr)
        return USER_ERROR if exc.failure_class == "bad_input" else SYSTEM_ERROR
    except (MediatorUnreachable, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return SYSTEM_ERROR


if __name__ == "__main__":
    sys.exit(main())
