"""Threaded TCP server exposing one depot over the wire protocol.

One thread per connection; connections may issue requests sequentially.
Framing errors poison the stream, so the server answers E_PROTO and closes;
all other errors are answered and the connection stays usable.
"""

from __future__ import annotations

import logging
import socket
import threading
from typing import Callable, Optional

from . import wire
from .capability import Capability, KIND_READ, KIND_WRITE, KIND_MANAGE, decode_key, parse as parse_cap
from .depot import ACTION_EXTEND, ACTION_PROBE, ACTION_RELEASE, Depot, parse_endpoint
from .errors import E_BIND, E_INTERNAL, E_NET, E_PROTO, EbpError
from .transforms import decode_params

log = logging.getLogger("ebp.server")

_WIRE_ACTIONS = {wire.MANAGE_PROBE: ACTION_PROBE, wire.MANAGE_EXTEND: ACTION_EXTEND,
                 wire.MANAGE_RELEASE: ACTION_RELEASE}


class DepotServer:
    """Serves ``depot`` on its configured listen endpoint.

    ``refuse_writes`` is the harness fault gate: when set and it returns
    True, an inbound WRITE is answered with E_NET (models a lossy hop).
    """

    def __init__(self, depot: Depot, sweep_interval: Optional[float] = None):
        self.depot = depot
        self.sweep_interval = sweep_interval
        self.refuse_writes: Optional[Callable[[], bool]] = None
        self._listener: Optional[socket.socket] = None
        self._accept_thread: Optional[threading.Thread] = None
        self._sweep_thread: Optional[threading.Thread] = None
        self._stopping = threading.Event()
        self._conn_lock = threading.Lock()
        self._conns: set[socket.socket] = set()

    @property
    def endpoint(self) -> str:
        return self.depot.endpoint

    def start(self) -> "DepotServer":
        host, port = parse_endpoint(self.depot.config.listen_endpoint)
        try:
            self._listener = socket.create_server((host, port), backlog=64)
        except OSError as exc:
            raise EbpError(E_BIND, f"cannot bind {host}:{port}: {exc}") from None
        actual_port = self._listener.getsockname()[1]
        self.depot.endpoint = f"{host}:{actual_port}"
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name=f"ebp-accept-{self.depot.node_id}",
            daemon=True)
        self._accept_thread.start()
        if self.sweep_interval:
            self._sweep_thread = threading.Thread(
                target=self._sweep_loop, name=f"ebp-sweep-{self.depot.node_id}",
                daemon=True)
            self._sweep_thread.start()
        log.info("%s listening on %s", self.depot.node_id, self.depot.endpoint)
        return self

    def shutdown(self) -> None:
        self._stopping.set()
        if self._listener is not None:
            try:
                # close() alone does not wake a thread blocked in accept()
                self._listener.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                self._listener.close()
            except OSError:
                pass
        with self._conn_lock:
            conns = list(self._conns)
        for conn in conns:
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                conn.close()
            except OSError:
                pass
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=5)

    def __enter__(self) -> "DepotServer":
        return self

    def __exit__(self, *exc_info) -> None:
        self.shutdown()

    def _sweep_loop(self) -> None:
        while not self._stopping.wait(self.sweep_interval):
            self.depot.expire_sweep()

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            with self._conn_lock:
                self._conns.add(conn)
            threading.Thread(target=self._serve_connection, args=(conn,),
                             name=f"ebp-conn-{self.depot.node_id}", daemon=True).start()

    def _serve_connection(self, conn: socket.socket) -> None:
        conn.settimeout(self.depot.config.request_timeout_seconds)
        stream = conn.makefile("rwb")
        try:
            while not self._stopping.is_set():
                try:
                    request = wire.decode_request(stream)
                except EbpError as exc:
                    self._send(stream, wire.Response.err(exc.code, exc.message))
                    return  # framing is untrustworthy after a protocol error
                except (socket.timeout, OSError, ValueError):
                    return
                if request is None:
                    return
                response = self._dispatch(request)
                body_bytes = len(request.body or b"") + len(response.body or b"")
                code = "OK" if response.status == wire.STATUS_OK else response.error_code
                log.info("%s %s %s %d", self.depot.node_id, request.verb, code,
                         body_bytes)
                if not self._send(stream, response):
                    return
        finally:
            try:
                stream.close()
            except (OSError, ValueError):
                pass
            try:
                conn.close()
            except OSError:
                pass
            with self._conn_lock:
                self._conns.discard(conn)

    def _send(self, stream, response: wire.Response) -> bool:
        try:
            stream.write(wire.encode_response(response))
            stream.flush()
            return True
        except EbpError:  # unencodable response is a server bug; drop the conn
            log.exception("%s: could not encode response", self.depot.node_id)
            return False
        except (OSError, ValueError):
            return False

    def _dispatch(self, request: wire.Request) -> wire.Response:
        try:
            return self._handle(request)
        except EbpError as exc:
            return wire.Response.err(exc.code, exc.message or exc.code)
        except Exception as exc:  # contract: never let a request kill the server
            log.exception("%s: internal error handling %s",
                          self.depot.node_id, request.verb)
            return wire.Response.err(E_INTERNAL, str(exc) or "internal error")

    def _local_cap(self, alloc_id: str, key_token: str, kind: str) -> Capability:
        return Capability(self.depot.node_id, self.depot.endpoint, alloc_id,
                          decode_key(key_token), kind)

    def _handle(self, request: wire.Request) -> wire.Response:
        depot = self.depot
        args = request.args
        if request.verb == wire.VERB_ALLOCATE:
            caps = depot.allocate(wire.parse_uint(args[0]), wire.parse_uint(args[1]))
            return wire.Response.ok(caps.read.to_uri(), caps.write.to_uri(),
                                    caps.manage.to_uri())
        if request.verb == wire.VERB_WRITE:
            gate = self.refuse_writes
            if gate is not None and gate():
                raise EbpError(E_NET, "injected fault: write refused")
            cap = self._local_cap(args[0], args[1], KIND_WRITE)
            written = depot.write(cap, wire.parse_uint(args[2]), request.body)
            return wire.Response.ok(written)
        if request.verb == wire.VERB_READ:
            cap = self._local_cap(args[0], args[1], KIND_READ)
            data = depot.read(cap, wire.parse_uint(args[2]), wire.parse_uint(args[3]))
            return wire.Response.ok(len(data), body=data)
        if request.verb == wire.VERB_MANAGE:
            cap = self._local_cap(args[0], args[1], KIND_MANAGE)
            duration = wire.parse_uint(args[3]) if len(args) == 4 else None
            status = depot.manage(cap, _WIRE_ACTIONS[args[2]], duration)
            return wire.Response.ok(status.size_limit,
                                    wire.format_seconds(status.expires_at),
                                    status.state.upper())
        if request.verb == wire.VERB_TRANSFER:
            src = self._local_cap(args[0], args[1], KIND_READ)
            dst = parse_cap(args[2])
            moved = depot.transfer_out(src, dst, wire.parse_uint(args[3]),
                                       wire.parse_uint(args[4]), wire.parse_uint(args[5]))
            return wire.Response.ok(moved)
        if request.verb == wire.VERB_TRANSFORM:
            n_in = wire.parse_uint(args[1])
            n_out = wire.parse_uint(args[2])
            uris = args[3:3 + n_in + n_out]
            inputs = [parse_cap(u) for u in uris[:n_in]]
            outputs = [parse_cap(u) for u in uris[n_in:]]
            params = decode_params(request.body or b"")
            results = depot.transform(args[0], inputs, outputs, params)
            return wire.Response.ok(*results)
        raise EbpError(E_PROTO, f"unknown verb {request.verb!r}")
