"""The data-plane node: leased buffer allocations under capability control.

A depot owns a table of fixed-size, zero-initialized byte buffers.  Each
allocation carries three independent random keys (read, write, manage) and a
lease; the depot enforces operator caps on allocation size, total footprint,
and lease duration, and serves the five primitives: allocate, write, read,
manage, and the compound transfer/transform operations.

Concurrency contract: mutating operations take the allocation's write lock,
reads share a read lock, and the expiry sweep serializes with in-flight
requests on the same allocation.  Capacity accounting is atomic under the
depot table lock.
"""

from __future__ import annotations

import base64
import secrets
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional

from . import capability
from .capability import Capability, KIND_MANAGE, KIND_READ, KIND_WRITE
from .errors import (E_ADJ, E_ARITY, E_CAP, E_EXPIRED, E_INTERNAL, E_LOCAL,
                     E_NOSPACE, E_POLICY, E_PROTO, E_RANGE, EbpError)
from .transforms import TransformRegistry, default_registry

DEFAULT_REQUEST_TIMEOUT = 30.0

ACTION_PROBE = "probe"
ACTION_EXTEND = "extend"
ACTION_RELEASE = "release"

STATE_ACTIVE = "active"
STATE_EXPIRED = "expired"


def parse_endpoint(text: str) -> tuple[str, int]:
    host, sep, port_text = text.rpartition(":")
    if not sep or not host:
        raise EbpError(E_PROTO, f"endpoint must be host:port, got {text!r}")
    try:
        port = int(port_text)
    except ValueError:
        raise EbpError(E_PROTO, f"bad port in endpoint {text!r}") from None
    if not 0 <= port <= 65535:
        raise EbpError(E_PROTO, f"port out of range in endpoint {text!r}")
    return host, port


@dataclass
class DepotConfig:
    """Operator-chosen identity, caps, and outbound transfer allowlist."""

    node_id: str
    listen_endpoint: str
    max_allocation_bytes: int
    max_total_bytes: int
    max_duration_seconds: int
    allowed_adjacent: set[str] = field(default_factory=set)
    adjacent_endpoints: dict[str, str] = field(default_factory=dict)
    request_timeout_seconds: float = DEFAULT_REQUEST_TIMEOUT
    max_transfer_bytes_per_request: int = 0  # 0 = uncapped (rate limiting TBD)

    def __post_init__(self):
        if not capability.valid_node_id(self.node_id):
            raise EbpError(E_PROTO, f"bad node_id {self.node_id!r}")
        parse_endpoint(self.listen_endpoint)
        for endpoint in self.adjacent_endpoints.values():
            parse_endpoint(endpoint)
        if self.max_allocation_bytes <= 0 or self.max_total_bytes <= 0:
            raise EbpError(E_PROTO, "byte caps must be positive")
        if self.max_allocation_bytes > self.max_total_bytes:
            raise EbpError(E_PROTO, "max_allocation_bytes exceeds max_total_bytes")
        if self.max_duration_seconds <= 0:
            raise EbpError(E_PROTO, "max_duration_seconds must be positive")
        if self.request_timeout_seconds <= 0:
            raise EbpError(E_PROTO, "request_timeout_seconds must be positive")
        if self.max_transfer_bytes_per_request < 0:
            raise EbpError(E_PROTO, "max_transfer_bytes_per_request must be >= 0")


_INT_KEYS = ("max_allocation_bytes", "max_total_bytes", "max_duration_seconds",
             "max_transfer_bytes_per_request")


def parse_config(text: str) -> DepotConfig:
    """Parse the line-based ``key = value`` depot config format."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise EbpError(E_PROTO, f"config line {lineno} is not key = value")
        key, value = key.strip(), value.strip()
        if key in values:
            raise EbpError(E_PROTO, f"duplicate config key {key!r}")
        values[key] = value

    def pop(key: str, default: Optional[str] = None) -> str:
        if key in values:
            return values.pop(key)
        if default is None:
            raise EbpError(E_PROTO, f"config missing required key {key!r}")
        return default

    node_id = pop("node_id")
    listen_endpoint = pop("listen_endpoint")
    ints = {}
    for key in _INT_KEYS:
        raw_value = pop(key, "0" if key == "max_transfer_bytes_per_request" else None)
        try:
            ints[key] = int(raw_value)
        except ValueError:
            raise EbpError(E_PROTO, f"config key {key!r} must be an integer") from None
    allowed = pop("allowed_adjacent", "")
    allowed_adjacent = {t.strip() for t in allowed.split(",") if t.strip()}
    endpoints_text = pop("adjacent_endpoints", "")
    adjacent_endpoints = {}
    for item in (t.strip() for t in endpoints_text.split(",") if t.strip()):
        node, sep, endpoint = item.partition("=")
        if not sep:
            raise EbpError(E_PROTO, f"adjacent_endpoints entry {item!r} is not node=host:port")
        adjacent_endpoints[node.strip()] = endpoint.strip()
    timeout_text = pop("request_timeout_seconds", str(DEFAULT_REQUEST_TIMEOUT))
    try:
        timeout = float(timeout_text)
    except ValueError:
        raise EbpError(E_PROTO, "request_timeout_seconds must be a number") from None
    if values:
        raise EbpError(E_PROTO, f"unknown config keys: {sorted(values)}")
    return DepotConfig(
        node_id=node_id,
        listen_endpoint=listen_endpoint,
        max_allocation_bytes=ints["max_allocation_bytes"],
        max_total_bytes=ints["max_total_bytes"],
        max_duration_seconds=ints["max_duration_seconds"],
        allowed_adjacent=allowed_adjacent,
        adjacent_endpoints=adjacent_endpoints,
        request_timeout_seconds=timeout,
        max_transfer_bytes_per_request=ints["max_transfer_bytes_per_request"],
    )


def load_config(path: str | Path) -> DepotConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


class _RWLock:
    """Shared readers / exclusive writer; no fairness guarantees needed here."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False

    def acquire(self, write: bool) -> None:
        with self._cond:
            if write:
                while self._writer or self._readers:
                    self._cond.wait()
                self._writer = True
            else:
                while self._writer:
                    self._cond.wait()
                self._readers += 1

    def release(self, write: bool) -> None:
        with self._cond:
            if write:
                self._writer = False
            else:
                self._readers -= 1
            self._cond.notify_all()


@dataclass
class AllocationRecord:
    alloc_id: str
    size_limit: int
    data: Optional[bytearray]
    created_at: float
    expires_at: float
    read_key: bytes
    write_key: bytes
    manage_key: bytes
    state: str = STATE_ACTIVE
    lock: _RWLock = field(default_factory=_RWLock, repr=False)

    def key_for(self, kind: str) -> bytes:
        return {KIND_READ: self.read_key, KIND_WRITE: self.write_key,
                KIND_MANAGE: self.manage_key}[kind]


class AllocationStatus(NamedTuple):
    size_limit: int
    expires_at: float
    state: str


class CapabilitySet(NamedTuple):
    read: Capability
    write: Capability
    manage: Capability


class _View:
    """Buffer accessor handed to transform implementations.

    The transform dispatcher holds the allocation locks for the whole call,
    so views touch the record bytes directly.
    """

    def __init__(self, record: AllocationRecord, writable: bool):
        self._record = record
        self._writable = writable
        self.alloc_id = record.alloc_id
        self.size = record.size_limit

    def read(self, offset: int, length: int) -> bytes:
        if offset < 0 or length < 0 or offset + length > self.size:
            raise EbpError(E_RANGE, "transform read out of bounds")
        return bytes(self._record.data[offset:offset + length])

    def write(self, offset: int, data: bytes) -> int:
        if not self._writable:
            raise EbpError(E_INTERNAL, "transform wrote to an input buffer")
        if offset < 0 or offset + len(data) > self.size:
            raise EbpError(E_RANGE, "transform write out of bounds")
        self._record.data[offset:offset + len(data)] = data
        return len(data)


class Depot:
    """One data-plane node.

    ``clock`` supplies the time used for lease decisions (the harness swaps
    in a simulated clock); ``rng`` supplies key material and should only be
    replaced with a seeded generator in tests.
    """

    def __init__(
        self,
        config: DepotConfig,
        clock: Callable[[], float] = time.time,
        registry: Optional[TransformRegistry] = None,
        rng: Callable[[int], bytes] = secrets.token_bytes,
    ):
        self.config = config
        self.clock = clock
        self.registry = registry if registry is not None else default_registry()
        self.rng = rng
        self.endpoint = config.listen_endpoint  # server rewrites after bind
        self._lock = threading.Lock()
        self._records: dict[str, AllocationRecord] = {}
        self._live_bytes = 0

    @property
    def node_id(self) -> str:
        return self.config.node_id

    def live_bytes(self) -> int:
        with self._lock:
            return self._live_bytes

    # -- allocation lifecycle ------------------------------------------------

    def allocate(self, size: int, duration: int) -> CapabilitySet:
        if size <= 0 or duration <= 0:
            raise EbpError(E_PROTO, "size and duration must be positive")
        if size > self.config.max_allocation_bytes:
            raise EbpError(E_POLICY,
                           f"size {size} exceeds cap {self.config.max_allocation_bytes}")
        if duration > self.config.max_duration_seconds:
            raise EbpError(E_POLICY,
                           f"duration {duration} exceeds cap {self.config.max_duration_seconds}")
        now = self.clock()
        self.expire_sweep(now)
        keys = self._fresh_keys()
        with self._lock:
            if self._live_bytes + size > self.config.max_total_bytes:
                raise EbpError(E_NOSPACE,
                               f"{size} bytes would exceed total cap "
                               f"{self.config.max_total_bytes}")
            alloc_id = self._fresh_alloc_id()
            record = AllocationRecord(
                alloc_id=alloc_id,
                size_limit=size,
                data=bytearray(size),
                created_at=now,
                expires_at=now + duration,
                read_key=keys[0],
                write_key=keys[1],
                manage_key=keys[2],
            )
            self._records[alloc_id] = record
            self._live_bytes += size
        return CapabilitySet(
            read=Capability(self.node_id, self.endpoint, alloc_id, keys[0], KIND_READ),
            write=Capability(self.node_id, self.endpoint, alloc_id, keys[1], KIND_WRITE),
            manage=Capability(self.node_id, self.endpoint, alloc_id, keys[2], KIND_MANAGE),
        )

    def _fresh_keys(self) -> tuple[bytes, bytes, bytes]:
        while True:
            keys = (self.rng(16), self.rng(16), self.rng(16))
            if len({keys[0], keys[1], keys[2]}) == 3:
                return keys

    def _fresh_alloc_id(self) -> str:
        while True:
            alloc_id = base64.urlsafe_b64encode(self.rng(8)).rstrip(b"=").decode("ascii")
            if alloc_id not in self._records:
                return alloc_id

    def expire_sweep(self, now: Optional[float] = None) -> int:
        """Reclaim every allocation whose lease has lapsed; returns the count."""
        if now is None:
            now = self.clock()
        with self._lock:
            candidates = [r for r in self._records.values()
                          if r.state == STATE_ACTIVE and r.expires_at <= now]
        reclaimed = 0
        for record in candidates:
            record.lock.acquire(write=True)
            try:
                with self._lock:
                    if record.state == STATE_ACTIVE and record.expires_at <= now:
                        record.state = STATE_EXPIRED
                        record.data = None
                        self._live_bytes -= record.size_limit
                        reclaimed += 1
            finally:
                record.lock.release(write=True)
        return reclaimed

    # -- capability resolution -----------------------------------------------

    def _resolve(self, alloc_id: str, key: bytes, kind: str,
                 now: Optional[float] = None) -> AllocationRecord:
        if now is None:
            now = self.clock()
        with self._lock:
            record = self._records.get(alloc_id)
        if record is None:
            raise EbpError(E_CAP, f"unknown allocation {alloc_id!r}")
        if not capability.verify(key, record.key_for(kind)):
            raise EbpError(E_CAP, "capability key does not verify")
        if record.state != STATE_ACTIVE or record.expires_at <= now:
            raise EbpError(E_EXPIRED, f"allocation {alloc_id!r} lease has lapsed")
        return record

    def _resolve_cap(self, cap: Capability, kind: str,
                     now: Optional[float] = None) -> AllocationRecord:
        return self._resolve(cap.alloc_id, cap.key, kind, now)

    def _locked(self, record: AllocationRecord, write: bool):
        """Re-validate liveness under the allocation lock."""
        return _HeldAllocation(self, record, write)

    # -- primitives ------------------------------------------------------------

    def write(self, cap: Capability, offset: int, payload: bytes) -> int:
        if offset < 0:
            raise EbpError(E_PROTO, "offset must be nonnegative")
        record = self._resolve_cap(cap, KIND_WRITE)
        if offset + len(payload) > record.size_limit:
            raise EbpError(E_RANGE,
                           f"offset+length {offset + len(payload)} exceeds "
                           f"size_limit {record.size_limit}")
        with self._locked(record, write=True):
            record.data[offset:offset + len(payload)] = payload
        return len(payload)

    def read(self, cap: Capability, offset: int, length: int) -> bytes:
        if offset < 0 or length < 0:
            raise EbpError(E_PROTO, "offset and length must be nonnegative")
        record = self._resolve_cap(cap, KIND_READ)
        if offset + length > record.size_limit:
            raise EbpError(E_RANGE,
                           f"offset+length {offset + length} exceeds "
                           f"size_limit {record.size_limit}")
        with self._locked(record, write=False):
            return bytes(record.data[offset:offset + length])

    def manage(self, cap: Capability, action: str,
               new_duration: Optional[int] = None) -> AllocationStatus:
        now = self.clock()
        if action == ACTION_PROBE:
            record = self._resolve_cap(cap, KIND_MANAGE, now)
            return AllocationStatus(record.size_limit, record.expires_at,
                                    STATE_ACTIVE)
        if action == ACTION_EXTEND:
            if new_duration is None or new_duration <= 0:
                raise EbpError(E_PROTO, "extend requires a positive duration")
            if new_duration > self.config.max_duration_seconds:
                raise EbpError(E_POLICY,
                               f"duration {new_duration} exceeds cap "
                               f"{self.config.max_duration_seconds}")
            record = self._resolve_cap(cap, KIND_MANAGE, now)
            with self._locked(record, write=True):
                record.expires_at = now + new_duration
                return AllocationStatus(record.size_limit, record.expires_at,
                                        STATE_ACTIVE)
        if action == ACTION_RELEASE:
            record = self._resolve_cap(cap, KIND_MANAGE, now)
            record.lock.acquire(write=True)
            try:
                with self._lock:
                    current = self._records.get(record.alloc_id)
                    if current is not record:
                        raise EbpError(E_CAP, "allocation already gone")
                    if record.state != STATE_ACTIVE:
                        raise EbpError(E_EXPIRED,
                                       f"allocation {record.alloc_id!r} lease has lapsed")
                    status = AllocationStatus(record.size_limit,
                                              record.expires_at, STATE_ACTIVE)
                    del self._records[record.alloc_id]
                    self._live_bytes -= record.size_limit
                    record.data = None
                    return status
            finally:
                record.lock.release(write=True)
        raise EbpError(E_PROTO, f"unknown manage action {action!r}")

    def transfer_out(self, src_cap: Capability, dst_cap: Capability,
                     src_offset: int, dst_offset: int, length: int) -> int:
        if src_offset < 0 or dst_offset < 0 or length < 0:
            raise EbpError(E_PROTO, "offsets and length must be nonnegative")
        cap_limit = self.config.max_transfer_bytes_per_request
        if cap_limit and length > cap_limit:
            raise EbpError(E_POLICY,
                           f"transfer length {length} exceeds per-request cap {cap_limit}")
        record = self._resolve_cap(src_cap, KIND_READ)
        if src_offset + length > record.size_limit:
            raise EbpError(E_RANGE, "source range exceeds size_limit")
        if dst_cap.node_id == self.node_id:
            # same-node transfer: a plain buffer-to-buffer copy
            with self._locked(record, write=False):
                payload = bytes(record.data[src_offset:src_offset + length])
            dst_write_cap = Capability(self.node_id, self.endpoint,
                                       dst_cap.alloc_id, dst_cap.key, KIND_WRITE)
            return self.write(dst_write_cap, dst_offset, payload)
        if (dst_cap.node_id not in self.config.allowed_adjacent
                or dst_cap.node_id not in self.config.adjacent_endpoints):
            raise EbpError(E_ADJ,
                           f"node {dst_cap.node_id!r} is not an allowed adjacency")
        endpoint = self.config.adjacent_endpoints[dst_cap.node_id]
        with self._locked(record, write=False):
            payload = bytes(record.data[src_offset:src_offset + length])
        from .client import DepotClient  # deferred: avoids import cycle at startup
        with DepotClient(endpoint, timeout=self.config.request_timeout_seconds) as client:
            try:
                return client.write_raw(dst_cap.alloc_id, dst_cap.key,
                                        dst_offset, payload)
            except EbpError as exc:
                raise EbpError(exc.code, f"remote: {exc.message}") from None

    def transform(self, op_name: str, input_caps: list[Capability],
                  output_caps: list[Capability], params: dict) -> list[int]:
        spec, impl = self.registry.resolve(op_name)
        n_in, n_out = len(input_caps), len(output_caps)
        if spec.n_inputs is None:
            if n_in < 1:
                raise EbpError(E_ARITY, f"{op_name} needs at least one input")
        elif n_in != spec.n_inputs:
            raise EbpError(E_ARITY,
                           f"{op_name} takes {spec.n_inputs} inputs, got {n_in}")
        if n_out != spec.n_outputs:
            raise EbpError(E_ARITY,
                           f"{op_name} takes {spec.n_outputs} outputs, got {n_out}")
        for cap in (*input_caps, *output_caps):
            if cap.node_id != self.node_id:
                raise EbpError(E_LOCAL,
                               f"capability names node {cap.node_id!r}, not this depot")
        now = self.clock()
        records: dict[str, AllocationRecord] = {}
        writable: set[str] = set()
        for cap in input_caps:
            records[cap.alloc_id] = self._resolve_cap(cap, KIND_READ, now)
        for cap in output_caps:
            records[cap.alloc_id] = self._resolve_cap(cap, KIND_WRITE, now)
            writable.add(cap.alloc_id)
        # lock in sorted order to avoid deadlock with concurrent transforms
        ordered = sorted(records)
        held: list[tuple[AllocationRecord, bool]] = []
        try:
            for alloc_id in ordered:
                record = records[alloc_id]
                write = alloc_id in writable
                record.lock.acquire(write=write)
                held.append((record, write))
                if record.state != STATE_ACTIVE or record.expires_at <= now:
                    raise EbpError(E_EXPIRED, f"allocation {alloc_id!r} lease has lapsed")
            inputs = [_View(records[c.alloc_id], writable=False) for c in input_caps]
            outputs = [_View(records[c.alloc_id], writable=True) for c in output_caps]
            try:
                results = impl(inputs, outputs, params)
            except EbpError:
                raise
            except Exception as exc:  # implementation bug, not a caller error
                raise EbpError(E_INTERNAL, f"transform failed: {exc}") from exc
            if len(results) != n_out:
                raise EbpError(E_INTERNAL,
                               f"{op_name} returned {len(results)} results for {n_out} outputs")
            return [int(r) for r in results]
        finally:
            for record, write in reversed(held):
                record.lock.release(write=write)

    # -- harness hooks ---------------------------------------------------------

    def corrupt(self, predicate: Callable[[str], bool], byte_index: int,
                xor_mask: int) -> int:
        """Flip a byte in every live allocation matching ``predicate``.

        Fault-injection hook for the simulation harness; returns the number
        of allocations touched.
        """
        with self._lock:
            targets = [r for r in self._records.values()
                       if r.state == STATE_ACTIVE and predicate(r.alloc_id)]
        touched = 0
        for record in targets:
            record.lock.acquire(write=True)
            try:
                if record.state == STATE_ACTIVE and byte_index < record.size_limit:
                    record.data[byte_index] ^= xor_mask
                    touched += 1
            finally:
                record.lock.release(write=True)
        return touched


class _HeldAllocation:
    """Context manager pairing an allocation lock with a liveness re-check."""

    def __init__(self, depot: Depot, record: AllocationRecord, write: bool):
        self._depot = depot
        self._record = record
        self._write = write

    def __enter__(self):
        self._record.lock.acquire(write=self._write)
        record = self._record
        if record.state != STATE_ACTIVE or record.expires_at <= self._depot.clock():
            self._record.lock.release(write=self._write)
            raise EbpError(E_EXPIRED,
                           f"allocation {record.alloc_id!r} lease has lapsed")
        return record

    def __exit__(self, *exc_info):
        self._record.lock.release(write=self._write)
        return False
