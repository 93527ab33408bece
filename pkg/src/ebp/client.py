"""TCP client for the depot protocol.

Used by the control plane and the CLI, and by depots themselves when they
push a transfer to an adjacent node.  A client is bound to one endpoint;
connections are reused sequentially and re-dialed on failure.  Any socket
failure surfaces as ``E_NET`` (the service is best-effort; callers retry or
fail over).
"""

from __future__ import annotations

import socket
from typing import Optional

from . import wire
from .capability import Capability, encode_key, parse as parse_cap
from .errors import E_NET, E_PROTO, EbpError

_ACTION_TO_WIRE = {"probe": wire.MANAGE_PROBE, "extend": wire.MANAGE_EXTEND,
                   "release": wire.MANAGE_RELEASE}


class DepotClient:
    """Sequentially-reusable connection to a single depot endpoint."""

    def __init__(self, endpoint: str, timeout: float = 30.0):
        host, _, port = endpoint.rpartition(":")
        if not host:
            raise EbpError(E_PROTO, f"endpoint must be host:port, got {endpoint!r}")
        self.endpoint = endpoint
        self.timeout = timeout
        self._addr = (host, int(port))
        self._sock: Optional[socket.socket] = None
        self._stream = None

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._stream.close()
                self._sock.close()
            except OSError:
                pass
            self._sock = None
            self._stream = None

    def __enter__(self) -> "DepotClient":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    def _connect(self) -> None:
        try:
            self._sock = socket.create_connection(self._addr, timeout=self.timeout)
            self._stream = self._sock.makefile("rwb")
        except OSError as exc:
            self._sock = None
            self._stream = None
            raise EbpError(E_NET, f"connect {self.endpoint}: {exc}") from None

    def _roundtrip(self, request: wire.Request, body_expected: bool) -> wire.Response:
        if self._sock is None:
            self._connect()
        try:
            self._stream.write(wire.encode_request(request))
            self._stream.flush()
            response = wire.decode_response(self._stream, body_expected=body_expected)
        except EbpError as exc:
            self.close()
            if exc.code == E_PROTO:
                raise
            raise EbpError(E_NET, f"{self.endpoint}: {exc.message}") from None
        except OSError as exc:
            self.close()
            raise EbpError(E_NET, f"{self.endpoint}: {exc}") from None
        if response is None:
            self.close()
            raise EbpError(E_NET, f"{self.endpoint}: connection closed mid-request")
        if response.status == wire.STATUS_ERR:
            raise EbpError(response.error_code, response.error_message)
        return response

    # -- primitive calls -----------------------------------------------------

    def allocate(self, size: int, duration: int) -> tuple[Capability, Capability, Capability]:
        resp = self._roundtrip(
            wire.Request(wire.VERB_ALLOCATE, (str(size), str(duration))), False)
        if len(resp.tokens) != 3:
            raise EbpError(E_PROTO, "allocate response must carry three URIs")
        read_cap, write_cap, manage_cap = (parse_cap(t) for t in resp.tokens)
        return read_cap, write_cap, manage_cap

    def write_raw(self, alloc_id: str, key: bytes, offset: int, payload: bytes) -> int:
        resp = self._roundtrip(
            wire.Request(wire.VERB_WRITE,
                         (alloc_id, encode_key(key), str(offset), str(len(payload))),
                         payload),
            False)
        if len(resp.tokens) != 1:
            raise EbpError(E_PROTO, "write response must carry a byte count")
        return wire.parse_uint(resp.tokens[0])

    def write(self, cap: Capability, offset: int, payload: bytes) -> int:
        return self.write_raw(cap.alloc_id, cap.key, offset, payload)

    def read(self, cap: Capability, offset: int, length: int) -> bytes:
        resp = self._roundtrip(
            wire.Request(wire.VERB_READ,
                         (cap.alloc_id, encode_key(cap.key), str(offset), str(length))),
            True)
        return resp.body if resp.body is not None else b""

    def manage(self, cap: Capability, action: str,
               duration: Optional[int] = None) -> tuple[int, float, str]:
        """Returns (size_limit, expires_at, state)."""
        verb_action = _ACTION_TO_WIRE.get(action)
        if verb_action is None:
            raise EbpError(E_PROTO, f"unknown manage action {action!r}")
        args = [cap.alloc_id, encode_key(cap.key), verb_action]
        if verb_action == wire.MANAGE_EXTEND:
            if duration is None:
                raise EbpError(E_PROTO, "extend requires a duration")
            args.append(str(duration))
        resp = self._roundtrip(wire.Request(wire.VERB_MANAGE, tuple(args)), False)
        if len(resp.tokens) != 3:
            raise EbpError(E_PROTO, "manage response must carry three tokens")
        return (wire.parse_uint(resp.tokens[0]), wire.parse_seconds(resp.tokens[1]),
                resp.tokens[2].lower())

    def transfer(self, src_cap: Capability, dst_cap: Capability,
                 src_offset: int, dst_offset: int, length: int) -> int:
        resp = self._roundtrip(
            wire.Request(wire.VERB_TRANSFER,
                         (src_cap.alloc_id, encode_key(src_cap.key), dst_cap.to_uri(),
                          str(src_offset), str(dst_offset), str(length))),
            False)
        if len(resp.tokens) != 1:
            raise EbpError(E_PROTO, "transfer response must carry a byte count")
        return wire.parse_uint(resp.tokens[0])

    def transform(self, op_name: str, input_caps: list[Capability],
                  output_caps: list[Capability], params: Optional[dict] = None) -> list[int]:
        from .transforms import encode_params
        body = encode_params(params or {})
        args = [op_name, str(len(input_caps)), str(len(output_caps))]
        args += [c.to_uri() for c in input_caps]
        args += [c.to_uri() for c in output_caps]
        args.append(str(len(body)))
        resp = self._roundtrip(wire.Request(wire.VERB_TRANSFORM, tuple(args), body), False)
        return [wire.parse_uint(t) for t in resp.tokens]


def for_capability(cap: Capability, timeout: float = 30.0) -> DepotClient:
    """Client dialing the endpoint embedded in a capability."""
    return DepotClient(cap.endpoint, timeout=timeout)
