"""Command-line entry points.

``ebp-depot serve`` runs a depot; ``ebp`` issues primitive and aggregated
operations against running depots.  Results go to stdout (URIs, tokens, or
raw bytes), diagnostics to stderr.  Exit codes: 0 success, 1 operational
error (stderr gets ``ERR <code> <message>``), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
from pathlib import Path

from . import capability, control, exnode as xn, harness, topology
from .client import DepotClient
from .depot import Depot, load_config
from .errors import E_PROTO, E_TTL, EbpError
from .server import DepotServer


def _timeout() -> float:
    value = os.environ.get("EBP_TIMEOUT_SECONDS")
    if value is None:
        return control.DEFAULT_TIMEOUT
    try:
        seconds = float(value)
    except ValueError:
        raise EbpError(E_PROTO, "EBP_TIMEOUT_SECONDS must be a number") from None
    if seconds <= 0:
        raise EbpError(E_PROTO, "EBP_TIMEOUT_SECONDS must be positive")
    return seconds


def _read_input(path: str | None) -> bytes:
    if path is None or path == "-":
        return sys.stdin.buffer.read()
    return Path(path).read_bytes()


def _write_output(path: str | None, data: bytes) -> None:
    if path is None or path == "-":
        sys.stdout.buffer.write(data)
        sys.stdout.buffer.flush()
    else:
        Path(path).write_bytes(data)


def _load_dir_graph(args) -> tuple:
    directory = topology.load_directory(Path(args.directory).read_text(encoding="utf-8"))
    graph = None
    if getattr(args, "graph", None):
        graph = topology.load_graph(Path(args.graph).read_text(encoding="utf-8"),
                                    directory)
    return directory, graph


# -- ebp-depot ---------------------------------------------------------------

def depot_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ebp-depot",
                                     description="Run a buffer depot.")
    sub = parser.add_subparsers(dest="command", required=True)
    serve = sub.add_parser("serve", help="serve a depot until signaled")
    serve.add_argument("--config", required=True, help="depot config file")
    serve.add_argument("--sweep-interval", type=float, default=1.0,
                       help="seconds between lease expiry sweeps")
    args = parser.parse_args(argv)

    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s %(message)s")
    try:
        config = load_config(args.config)
    except (OSError, EbpError) as exc:
        print(f"bad config: {exc}", file=sys.stderr)
        return 2
    depot = Depot(config)
    server = DepotServer(depot, sweep_interval=args.sweep_interval)
    try:
        server.start()
    except EbpError as exc:
        print(f"ERR {exc.code} {exc.message}", file=sys.stderr)
        return 1
    stop = threading.Event()
    for signum in (signal.SIGINT, signal.SIGTERM):
        signal.signal(signum, lambda *_: stop.set())
    stop.wait()
    server.shutdown()
    return 0


# -- ebp subcommands ---------------------------------------------------------

def _cmd_alloc(args) -> int:
    with DepotClient(args.depot, timeout=_timeout()) as client:
        read_cap, write_cap, manage_cap = client.allocate(args.size, args.duration)
    for cap in (read_cap, write_cap, manage_cap):
        print(cap.to_uri())
    return 0


def _cmd_write(args) -> int:
    cap = capability.parse(args.uri)
    payload = _read_input(args.infile)
    with DepotClient(cap.endpoint, timeout=_timeout()) as client:
        written = client.write(cap, args.offset, payload)
    print(written)
    return 0


def _cmd_read(args) -> int:
    cap = capability.parse(args.uri)
    with DepotClient(cap.endpoint, timeout=_timeout()) as client:
        data = client.read(cap, args.offset, args.length)
    _write_output(args.out, data)
    return 0


def _cmd_manage(args) -> int:
    cap = capability.parse(args.uri)
    with DepotClient(cap.endpoint, timeout=_timeout()) as client:
        size_limit, expires_at, state = client.manage(cap, args.action,
                                                      args.duration)
    print(f"{size_limit} {expires_at:g} {state}")
    return 0


def _cmd_xfer(args) -> int:
    src = capability.parse(args.src)
    dst = capability.parse(args.dst)
    with DepotClient(src.endpoint, timeout=_timeout()) as client:
        moved = client.transfer(src, dst, args.src_offset, args.dst_offset,
                                args.length)
    print(moved)
    return 0


def _cmd_transform(args) -> int:
    inputs = [capability.parse(u) for u in args.inputs or []]
    outputs = [capability.parse(u) for u in args.outputs or []]
    if not inputs and not outputs:
        raise EbpError(E_PROTO, "transform needs at least one capability")
    params = json.loads(args.params) if args.params else {}
    anchor = (inputs or outputs)[0]
    with DepotClient(anchor.endpoint, timeout=_timeout()) as client:
        results = client.transform(args.op, inputs, outputs, params)
    print(" ".join(str(r) for r in results))
    return 0


def _cmd_upload(args) -> int:
    directory, _ = _load_dir_graph(args)
    selection = ([s.strip() for s in args.depots.split(",") if s.strip()]
                 if args.depots else "round_robin")
    policy = control.UploadPolicy(
        block_size=args.block_size, replicas=args.replicas,
        parity_k=args.parity_k, depot_selection=selection,
        lease_seconds=args.lease)
    data = _read_input(args.infile)
    result = control.upload(data, policy, directory, timeout=_timeout())
    Path(args.out).write_bytes(xn.serialize(result))
    print(args.out)
    return 0


def _cmd_download(args) -> int:
    directory, _ = _load_dir_graph(args)
    document = xn.deserialize(Path(args.exnode).read_bytes())
    data = control.download(document, directory, timeout=_timeout())
    _write_output(args.out, data)
    if args.out and args.out != "-":
        print(args.out)
    return 0


def _cmd_warm(args) -> int:
    directory, _ = _load_dir_graph(args)
    document = xn.deserialize(Path(args.exnode).read_bytes())
    report = control.warm(document, directory, args.min_remaining,
                          args.extend_to, timeout=_timeout())
    for line in report.failures:
        print(line, file=sys.stderr)
    print(f"extended {report.extended} failed {report.failed} "
          f"skipped {report.skipped}")
    return 0


def _cmd_repair(args) -> int:
    directory, _ = _load_dir_graph(args)
    document = xn.deserialize(Path(args.exnode).read_bytes())
    policy = control.UploadPolicy(block_size=args.block_size,
                                  replicas=args.replicas,
                                  lease_seconds=args.lease)
    repaired = control.repair(document, directory, policy, timeout=_timeout())
    Path(args.out).write_bytes(xn.serialize(repaired))
    print(args.out)
    return 0


def _cmd_route(args) -> int:
    if args.directory:
        directory, graph = _load_dir_graph(args)
    else:
        graph = _graph_without_directory(Path(args.graph).read_text(encoding="utf-8"))
    path = topology.route(graph, getattr(args, "from"), args.to)
    print(" ".join(path))
    return 0


def _graph_without_directory(text: str) -> topology.AdjacencyGraph:
    graph = topology.AdjacencyGraph()
    pending = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3 or parts[1] != "->":
            raise EbpError(E_PROTO, f"graph line {line!r}: expected 'src -> dst'")
        graph.add_node(parts[0])
        graph.add_node(parts[2])
        pending.append((parts[0], parts[2]))
    for src, dst in pending:
        graph.add_edge(src, dst)
    return graph


def _cmd_send(args) -> int:
    directory, _ = _load_dir_graph(args)
    payload = _read_input(args.payload)
    path = [p.strip() for p in args.path.split(",") if p.strip()]
    report = control.datagram_send(payload, args.ttl, path, directory,
                                   lease_seconds=args.lease, timeout=_timeout())
    if not report.delivered:
        raise EbpError(E_TTL, f"dropped at forward {report.drop_forward}")
    print("delivered " + " ".join(str(t) for t in report.hop_ttls))
    return 0


def _cmd_store_exnode(args) -> int:
    directory, _ = _load_dir_graph(args)
    document = xn.deserialize(Path(args.exnode).read_bytes())
    wrapper = control.store_exnode(document, args.depot, directory, args.lease,
                                   timeout=_timeout())
    Path(args.out).write_bytes(xn.serialize(wrapper))
    print(args.out)
    return 0


def _cmd_demo(args) -> int:
    with harness.spawn_cluster(4, topology="chain", seed=args.seed) as cluster:
        directory = cluster.directory()
        payload = bytes((i * 31 + 7) % 256 for i in range(256 * 1024))
        policy = control.UploadPolicy(block_size=64 * 1024, replicas=2,
                                      lease_seconds=600)
        document = control.upload(payload, policy, directory)
        assert control.download(document, directory) == payload
        print(f"upload/download: {len(payload)} bytes across "
              f"{len(document.mappings)} mappings round-tripped")

        src = cluster.client("d0")
        caps = src.allocate(4096, 600)
        src.write(caps[1], 0, b"store-and-forward payload")
        dst_caps, report = control.multi_hop_transfer(
            caps[0], "d3", cluster.graph, directory, lease_seconds=600,
            length=4096)
        released = sum(1 for hop in report.per_hop if hop.released)
        print(f"multi-hop: {' -> '.join(report.path)} moved "
              f"{report.per_hop[0].transferred} bytes, "
              f"{released} intermediates released")

        dgram = control.datagram_send(b"ping", ttl=3, path=["d0", "d1", "d2", "d3"],
                                      directory=directory)
        print(f"datagram: delivered={dgram.delivered} hop ttls="
              + ",".join(str(t) for t in dgram.hop_ttls))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ebp", description="Client for buffer depots and exNode services.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("alloc", help="allocate a buffer on a depot")
    p.add_argument("--depot", required=True, help="host:port")
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--duration", type=int, required=True)
    p.set_defaults(func=_cmd_alloc)

    p = sub.add_parser("write", help="write bytes into an allocation")
    p.add_argument("uri", help="write capability URI")
    p.add_argument("--offset", type=int, default=0)
    p.add_argument("--in", dest="infile", help="payload file (default stdin)")
    p.set_defaults(func=_cmd_write)

    p = sub.add_parser("read", help="read bytes from an allocation")
    p.add_argument("uri", help="read capability URI")
    p.add_argument("--offset", type=int, default=0)
    p.add_argument("--length", type=int, required=True)
    p.add_argument("--out", help="output file (default stdout)")
    p.set_defaults(func=_cmd_read)

    p = sub.add_parser("manage", help="probe, extend, or release an allocation")
    p.add_argument("uri", help="manage capability URI")
    p.add_argument("--action", required=True,
                   choices=["probe", "extend", "release"])
    p.add_argument("--duration", type=int, help="new lease for extend")
    p.set_defaults(func=_cmd_manage)

    p = sub.add_parser("xfer", help="depot-to-depot transfer")
    p.add_argument("--src", required=True, help="source read capability URI")
    p.add_argument("--dst", required=True, help="destination write capability URI")
    p.add_argument("--src-offset", type=int, default=0)
    p.add_argument("--dst-offset", type=int, default=0)
    p.add_argument("--length", type=int, required=True)
    p.set_defaults(func=_cmd_xfer)

    p = sub.add_parser("transform", help="run a node-local transform")
    p.add_argument("--op", required=True)
    p.add_argument("--in", dest="inputs", action="append",
                   help="input read capability URI (repeatable)")
    p.add_argument("--out", dest="outputs", action="append",
                   help="output write capability URI (repeatable)")
    p.add_argument("--params", help="JSON parameter object")
    p.set_defaults(func=_cmd_transform)

    p = sub.add_parser("upload", help="stripe a file across depots")
    p.add_argument("--in", dest="infile", help="payload file (default stdin)")
    p.add_argument("--directory", required=True)
    p.add_argument("--out", required=True, help="exnode file to write")
    p.add_argument("--block-size", type=int, default=1 << 20)
    p.add_argument("--replicas", type=int, default=1)
    p.add_argument("--parity-k", type=int, default=0)
    p.add_argument("--lease", type=int, default=3600)
    p.add_argument("--depots", help="comma-separated node ids (default round robin)")
    p.set_defaults(func=_cmd_upload)

    p = sub.add_parser("download", help="materialize an exnode's payload")
    p.add_argument("--exnode", required=True)
    p.add_argument("--directory", required=True)
    p.add_argument("--out", help="output file (default stdout)")
    p.set_defaults(func=_cmd_download)

    p = sub.add_parser("warm", help="extend leases that are close to expiry")
    p.add_argument("--exnode", required=True)
    p.add_argument("--directory", required=True)
    p.add_argument("--min-remaining", type=float, required=True)
    p.add_argument("--extend-to", type=int, required=True)
    p.set_defaults(func=_cmd_warm)

    p = sub.add_parser("repair", help="re-replicate or reconstruct lost blocks")
    p.add_argument("--exnode", required=True)
    p.add_argument("--directory", required=True)
    p.add_argument("--out", required=True, help="repaired exnode file")
    p.add_argument("--block-size", type=int, default=1 << 20)
    p.add_argument("--replicas", type=int, default=1)
    p.add_argument("--lease", type=int, default=3600)
    p.set_defaults(func=_cmd_repair)

    p = sub.add_parser("route", help="minimum-hop route through the graph")
    p.add_argument("--graph", required=True)
    p.add_argument("--directory", help="validate nodes against a directory")
    p.add_argument("--from", required=True)
    p.add_argument("--to", required=True)
    p.set_defaults(func=_cmd_route)

    p = sub.add_parser("send", help="send a datagram along a depot path")
    p.add_argument("--payload", help="payload file (default stdin)")
    p.add_argument("--ttl", type=int, required=True)
    p.add_argument("--path", required=True, help="comma-separated node ids")
    p.add_argument("--directory", required=True)
    p.add_argument("--lease", type=int, default=60)
    p.set_defaults(func=_cmd_send)

    p = sub.add_parser("store-exnode", help="store an exnode in the data plane")
    p.add_argument("--exnode", required=True)
    p.add_argument("--depot", required=True, help="node id of the hosting depot")
    p.add_argument("--directory", required=True)
    p.add_argument("--lease", type=int, default=3600)
    p.add_argument("--out", required=True, help="wrapper exnode file")
    p.set_defaults(func=_cmd_store_exnode)

    p = sub.add_parser("demo", help="run the built-in cluster scenarios")
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=_cmd_demo)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except EbpError as exc:
        print(f"ERR {exc.code} {exc.message}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"file not found: {exc.filename}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as exc:
        print(f"bad JSON argument: {exc}", file=sys.stderr)
        return 2
    except BrokenPipeError:
        return 1


if __name__ == "__main__":
    sys.exit(main())
