"""Client-side services that aggregate depot primitives into abstractions.

Everything here acts as a pure client of depots: striped upload/download with
replication and XOR parity, lease warming, block repair, multi-hop
store-and-forward transfer, datagram emulation, and storing exNodes
themselves in data-plane allocations.  There is no standing controller
process; state lives in exNode documents.

Failure handling is redundancy-driven: reads fail over across replicas in
rank order, and a block with no readable replica is rebuilt from its parity
group by shipping the surviving members to the depot that holds the parity
block and running the XOR transform there (transforms are node-local).
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import exnode as xn
from .capability import Capability
from .client import DepotClient
from .depot import CapabilitySet
from .errors import (E_DIGEST, E_HOLE, E_NET, E_NOSPACE, E_POLICY, E_PROTO,
                     E_TTL, E_UNRECOVERABLE, EbpError)
from .exnode import ExNode, Mapping, ParityGroup
from .topology import AdjacencyGraph, DepotDirectory, route

DEFAULT_TIMEOUT = 30.0
ATTR_DIGEST = "sha256"
ATTR_CONTENT = "content"


def range_digest_key(offset: int, length: int) -> str:
    return f"sha256:{offset}+{length}"


def parity_digest_key(group_index: int) -> str:
    return f"sha256:parity:{group_index}"


@dataclass
class UploadPolicy:
    """Placement knobs for one upload."""

    block_size: int
    replicas: int = 1
    parity_k: int = 0  # 0 = no parity; k >= 2 = data blocks per XOR group
    depot_selection: object = "round_robin"  # or an ordered node_id list
    lease_seconds: int = 300

    def __post_init__(self):
        if self.block_size <= 0:
            raise EbpError(E_PROTO, "block_size must be positive")
        if self.replicas < 1:
            raise EbpError(E_PROTO, "replicas must be >= 1")
        if self.parity_k not in (0,) and self.parity_k < 2:
            raise EbpError(E_PROTO, "xor parity needs k >= 2 data blocks per group")
        if self.lease_seconds <= 0:
            raise EbpError(E_PROTO, "lease_seconds must be positive")


@dataclass
class HopReport:
    node_id: str
    allocated: int = 0
    transferred: int = 0
    released: bool = False


@dataclass
class TransferReport:
    path: list[str]
    per_hop: list[HopReport]
    elapsed: float = 0.0


@dataclass
class WarmReport:
    extended: int = 0
    failed: int = 0
    skipped: int = 0
    failures: list[str] = field(default_factory=list)


@dataclass
class DeliveryReport:
    path: list[str]
    delivered: bool
    hop_ttls: list[int]              # TTL observed on arrival at each node reached
    drop_forward: Optional[int] = None  # 1-based forward index that hit E_TTL
    dst_caps: Optional[CapabilitySet] = None
    frame_length: int = 0


class _DepotPool:
    """Directory-aware cache of sequentially reused depot clients."""

    def __init__(self, directory: DepotDirectory, timeout: float):
        self.directory = directory
        self.timeout = timeout
        self._clients: dict[str, DepotClient] = {}

    def for_endpoint(self, endpoint: str) -> DepotClient:
        client = self._clients.get(endpoint)
        if client is None:
            client = DepotClient(endpoint, timeout=self.timeout)
            self._clients[endpoint] = client
        return client

    def for_node(self, node_id: str) -> DepotClient:
        return self.for_endpoint(self.directory.endpoint(node_id))

    def for_cap(self, cap: Capability) -> DepotClient:
        if cap.node_id in self.directory.entries:
            return self.for_node(cap.node_id)
        return self.for_endpoint(cap.endpoint)

    def close(self) -> None:
        for client in self._clients.values():
            client.close()
        self._clients.clear()

    def __enter__(self) -> "_DepotPool":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def _caps_to_uris(caps: CapabilitySet) -> dict[str, str]:
    return {"read": caps.read.to_uri(), "write": caps.write.to_uri(),
            "manage": caps.manage.to_uri()}


def _release_quietly(pool: _DepotPool, caps: CapabilitySet) -> bool:
    try:
        pool.for_cap(caps.manage).manage(caps.manage, "release")
        return True
    except EbpError:
        return False


class _Placer:
    """Deterministic round-robin placement that skips failing depots."""

    def __init__(self, pool: _DepotPool, order: list[str]):
        if not order:
            raise EbpError(E_PROTO, "no depots to place on")
        self.pool = pool
        self.order = order
        self.cursor = 0
        self.dead: set[str] = set()

    def place(self, size: int, lease_seconds: int,
              exclude: set[str]) -> tuple[str, CapabilitySet]:
        last_error: Optional[EbpError] = None
        for off in range(len(self.order)):
            node = self.order[(self.cursor + off) % len(self.order)]
            if node in exclude or node in self.dead:
                continue
            try:
                caps = self.pool.for_node(node).allocate(size, lease_seconds)
            except EbpError as exc:
                last_error = exc
                if exc.code == E_NET:
                    self.dead.add(node)
                continue
            self.cursor = (self.order.index(node) + 1) % len(self.order)
            return node, CapabilitySet(*caps)
        raise last_error or EbpError(E_NOSPACE, "no depot could host the block")

    def place_tiered(self, size: int, lease_seconds: int,
                     tiers: list[set[str]]) -> tuple[str, CapabilitySet]:
        """Try progressively weaker exclusion sets before giving up."""
        last_error: Optional[EbpError] = None
        for exclude in tiers:
            try:
                return self.place(size, lease_seconds, exclude)
            except EbpError as exc:
                last_error = exc
        raise last_error or EbpError(E_NOSPACE, "no depot could host the block")


def _depot_order(policy: UploadPolicy, directory: DepotDirectory) -> list[str]:
    if policy.depot_selection == "round_robin":
        return directory.node_ids()
    order = list(policy.depot_selection)
    for node in order:
        directory.endpoint(node)  # raises E_UNKNOWN_NODE for stale lists
    if not order:
        raise EbpError(E_PROTO, "depot_selection is empty")
    return order


def _xor_blocks(blocks: list[bytes]) -> bytes:
    acc = 0
    length = len(blocks[0])
    for block in blocks:
        acc ^= int.from_bytes(block, "big")
    return acc.to_bytes(length, "big") if length else b""


def upload(data: bytes, policy: UploadPolicy, directory: DepotDirectory,
           timeout: float = DEFAULT_TIMEOUT) -> ExNode:
    """Stripe ``data`` across depots; returns a complete exNode.

    Every block lands on ``policy.replicas`` distinct depots; with parity
    enabled, consecutive blocks form XOR groups whose parity block lands on
    yet another depot.  The exNode records a whole-payload digest plus
    per-block digests used for corruption detection on download/repair.
    """
    bs = policy.block_size
    n = len(data)
    block_count = (n + bs - 1) // bs
    attributes = {ATTR_DIGEST: hashlib.sha256(data).hexdigest()}
    created: list[CapabilitySet] = []
    with _DepotPool(directory, timeout) as pool:
        placer = _Placer(pool, _depot_order(policy, directory))
        try:
            mappings: list[Mapping] = []
            block_hosts: list[set[str]] = []
            for i in range(block_count):
                logical_offset = i * bs
                block = data[logical_offset:logical_offset + bs]
                attributes[range_digest_key(logical_offset, len(block))] = (
                    hashlib.sha256(block).hexdigest())
                hosts: set[str] = set()
                for replica in range(policy.replicas):
                    node, caps = placer.place(bs, policy.lease_seconds, exclude=hosts)
                    created.append(caps)
                    pool.for_node(node).write(caps.write, 0, block)
                    hosts.add(node)
                    mappings.append(Mapping(
                        logical_offset=logical_offset,
                        length=len(block),
                        alloc_offset=0,
                        caps=_caps_to_uris(caps),
                        replica_index=replica,
                    ))
                block_hosts.append(hosts)
            groups: list[ParityGroup] = []
            if policy.parity_k >= 2:
                for g, start in enumerate(range(0, block_count, policy.parity_k)):
                    members = list(range(start, min(start + policy.parity_k,
                                                    block_count)))
                    padded = [
                        data[b * bs:(b + 1) * bs].ljust(bs, b"\x00") for b in members
                    ]
                    parity = _xor_blocks(padded)
                    # keep parity off the member depots when the cluster allows
                    # it; with replicas >= 2 sharing a depot costs nothing for
                    # the single-loss bound, so relax rather than fail
                    all_hosts = set().union(*(block_hosts[b] for b in members))
                    tiers = [all_hosts]
                    if policy.replicas >= 2:
                        tiers.append(set())
                    node, caps = placer.place_tiered(bs, policy.lease_seconds, tiers)
                    created.append(caps)
                    pool.for_node(node).write(caps.write, 0, parity)
                    attributes[parity_digest_key(g)] = hashlib.sha256(parity).hexdigest()
                    # data_members point at each block's replica-0 mapping
                    groups.append(ParityGroup(
                        scheme="xor",
                        block_length=bs,
                        data_members=tuple(b * policy.replicas for b in members),
                        parity_member=Mapping(
                            logical_offset=members[0] * bs,
                            length=bs,
                            alloc_offset=0,
                            caps=_caps_to_uris(caps),
                            replica_index=0,
                        ),
                    ))
            result = ExNode(logical_length=n, mappings=tuple(mappings),
                            parity_groups=tuple(groups), attributes=attributes)
        except BaseException:
            for caps in created:
                _release_quietly(pool, caps)
            raise
    return result


def _try_read(pool: _DepotPool, cap: Capability, offset: int, length: int
              ) -> Optional[bytes]:
    try:
        return pool.for_cap(cap).read(cap, offset, length)
    except EbpError:
        return None


def _digest_ok(exnode: ExNode, mapping: Mapping, data: bytes) -> bool:
    expected = exnode.attributes.get(
        range_digest_key(mapping.logical_offset, mapping.length))
    if expected is None:
        return True
    return hashlib.sha256(data).hexdigest() == expected


def _group_for_mapping(exnode: ExNode, mapping_index: int
                       ) -> Optional[tuple[int, ParityGroup, int]]:
    """Locate the parity group protecting a mapping's logical block.

    Returns (group_index, group, member_position) or None.  Matching is by
    index first, then by identical logical range (replica mappings are not
    listed as members but carry the same block content).
    """
    target = exnode.mappings[mapping_index]
    for g, group in enumerate(exnode.parity_groups):
        for pos, idx in enumerate(group.data_members):
            if idx >= len(exnode.mappings):
                continue
            member = exnode.mappings[idx]
            if idx == mapping_index or (
                    member.logical_offset == target.logical_offset
                    and member.length == target.length):
                return g, group, pos
    return None


def _read_block_any_replica(exnode: ExNode, pool: _DepotPool, member: Mapping,
                            block_length: int, skip: set[int]) -> Optional[bytes]:
    """Fetch one group member's protected bytes via any healthy replica."""
    candidates = [
        (m.replica_index, i, m) for i, m in enumerate(exnode.mappings)
        if i not in skip
        and m.logical_offset == member.logical_offset
        and m.length == member.length
    ]
    for _, _, m in sorted(candidates, key=lambda c: (c[0], c[1])):
        data = _try_read(pool, m.read_cap(), m.alloc_offset, m.length)
        if data is None or not _digest_ok(exnode, m, data):
            continue
        return data.ljust(block_length, b"\x00")
    return None


def _reconstruct_block(exnode: ExNode, pool: _DepotPool, group_index: int,
                       missing_pos: int, lease_seconds: int) -> Optional[bytes]:
    """Rebuild one group member on the depot holding the parity block.

    Surviving members are copied next to the parity allocation (by depot
    transfer when adjacency allows it, by client relay otherwise), the XOR
    transform runs there, and the rebuilt block is read back.  Returns None
    when any surviving member or the parity block is unavailable.
    """
    group = exnode.parity_groups[group_index]
    parity_cap = group.parity_member.read_cap()
    site = pool.for_cap(parity_cap)
    expected = exnode.attributes.get(parity_digest_key(group_index))
    parity_data = _try_read(pool, parity_cap, group.parity_member.alloc_offset,
                            group.block_length)
    if parity_data is None:
        return None
    if expected is not None and hashlib.sha256(parity_data).hexdigest() != expected:
        return None
    survivors: list[bytes] = []
    for pos, idx in enumerate(group.data_members):
        if pos == missing_pos:
            continue
        if idx >= len(exnode.mappings):
            return None
        data = _read_block_any_replica(exnode, pool, exnode.mappings[idx],
                                       group.block_length, skip=set())
        if data is None:
            return None
        survivors.append(data)
    scratch: list[CapabilitySet] = []
    try:
        inputs = [parity_cap]
        for data in survivors:
            caps = CapabilitySet(*site.allocate(group.block_length, lease_seconds))
            scratch.append(caps)
            site.write(caps.write, 0, data)
            inputs.append(caps.read)
        result = CapabilitySet(*site.allocate(group.block_length, lease_seconds))
        scratch.append(result)
        site.transform("parity/xor", inputs, [result.write],
                       {"length": group.block_length})
        return site.read(result.read, 0, group.block_length)
    except EbpError:
        return None
    finally:
        for caps in scratch:
            _release_quietly(pool, caps)


def download(exnode: ExNode, directory: DepotDirectory,
             timeout: float = DEFAULT_TIMEOUT, verify: bool = True) -> bytes:
    """Materialize the full logical extent, failing over across replicas and
    reconstructing lost blocks from parity groups."""
    holes = xn.coverage_holes(exnode)
    if holes:
        raise EbpError(E_HOLE, f"extent has uncovered ranges {holes}")
    out = bytearray(exnode.logical_length)
    with _DepotPool(directory, timeout) as pool:
        for segment in xn.resolve(exnode, 0, exnode.logical_length):
            data = None
            for source in segment.sources:
                m = source.mapping
                whole_mapping = (segment.offset == m.logical_offset
                                 and segment.length == m.length)
                data = _try_read(pool, m.read_cap(), source.alloc_offset,
                                 segment.length)
                if data is not None and whole_mapping and not _digest_ok(exnode, m, data):
                    data = None
                if data is not None:
                    break
            if data is None:
                data = _rebuild_segment(exnode, pool, segment)
            if data is None:
                raise EbpError(E_UNRECOVERABLE,
                               f"no replica or parity can serve "
                               f"[{segment.offset}, {segment.offset + segment.length})")
            out[segment.offset:segment.offset + segment.length] = data
    payload = bytes(out)
    if verify:
        expected = exnode.attributes.get(ATTR_DIGEST)
        if expected is not None and hashlib.sha256(payload).hexdigest() != expected:
            raise EbpError(E_DIGEST, "payload digest mismatch")
    return payload


def _rebuild_segment(exnode: ExNode, pool: _DepotPool,
                     segment: xn.Segment) -> Optional[bytes]:
    for source in segment.sources:
        located = _group_for_mapping(exnode, source.mapping_index)
        if located is None:
            continue
        group_index, group, pos = located
        member = exnode.mappings[group.data_members[pos]]
        rebuilt = _reconstruct_block(exnode, pool, group_index, pos,
                                     lease_seconds=60)
        if rebuilt is None:
            continue
        logical = rebuilt[:member.length]
        if not _digest_ok(exnode, member, logical):
            continue
        start = segment.offset - member.logical_offset
        return logical[start:start + segment.length]
    return None


def warm(exnode: ExNode, directory: DepotDirectory, min_remaining: float,
         extend_to: int, clock: Callable[[], float] = time.time,
         timeout: float = DEFAULT_TIMEOUT) -> WarmReport:
    """Extend every lease with less than ``min_remaining`` seconds left.

    Never shortens a lease; per-allocation failures are reported, not raised.
    """
    report = WarmReport()
    with _DepotPool(directory, timeout) as pool:
        for mapping in _all_mappings(exnode):
            label = mapping.caps.get("manage", mapping.caps.get("read", "?"))
            try:
                manage_cap = mapping.cap("manage")
            except EbpError as exc:
                report.failed += 1
                report.failures.append(f"{label}: {exc.code} {exc.message}")
                continue
            if manage_cap is None:
                report.failed += 1
                report.failures.append(f"{label}: no manage capability")
                continue
            try:
                client = pool.for_cap(manage_cap)
                _, expires_at, _ = client.manage(manage_cap, "probe")
                now = clock()
                if expires_at - now >= min_remaining:
                    report.skipped += 1
                    continue
                if now + extend_to < expires_at:
                    report.skipped += 1  # extending would shorten; leave it
                    continue
                client.manage(manage_cap, "extend", extend_to)
                report.extended += 1
            except EbpError as exc:
                report.failed += 1
                report.failures.append(f"{label}: {exc.code} {exc.message}")
    return report


def _all_mappings(exnode: ExNode):
    yield from exnode.mappings
    for group in exnode.parity_groups:
        yield group.parity_member


def repair(exnode: ExNode, directory: DepotDirectory, policy: UploadPolicy,
           timeout: float = DEFAULT_TIMEOUT) -> ExNode:
    """Replace every unreadable or corrupted mapping with a fresh allocation.

    Healthy mappings are kept verbatim; replacements carry the same logical
    range and replica_index.  Raises E_UNRECOVERABLE if any broken block has
    neither a healthy replica nor a usable parity group.
    """
    with _DepotPool(directory, timeout) as pool:
        placer = _Placer(pool, _depot_order(policy, directory))
        mappings = list(exnode.mappings)
        broken: list[int] = []
        for i, m in enumerate(mappings):
            data = _try_read(pool, m.read_cap(), m.alloc_offset, m.length)
            if data is None or not _digest_ok(exnode, m, data):
                broken.append(i)
        unrecoverable: list[int] = []
        for i in broken:
            m = mappings[i]
            located = _group_for_mapping(exnode, i)
            block_length = located[1].block_length if located else m.length
            data = _read_block_any_replica(exnode, pool, m, block_length,
                                           skip=set(broken))
            if data is None and located is not None:
                data = _reconstruct_block(exnode, pool, located[0], located[2],
                                          policy.lease_seconds)
                if data is not None and not _digest_ok(exnode, m, data[:m.length]):
                    data = None
            if data is None:
                unrecoverable.append(i)
                continue
            exclude = _hosts_of_range(mappings, m, except_index=i) | {m.allocation()[0]}
            node, caps = placer.place(block_length, policy.lease_seconds,
                                      exclude=exclude)
            pool.for_node(node).write(caps.write, 0, data[:m.length])
            mappings[i] = Mapping(
                logical_offset=m.logical_offset, length=m.length, alloc_offset=0,
                caps=_caps_to_uris(caps), replica_index=m.replica_index)
        groups = list(exnode.parity_groups)
        repaired = ExNode(logical_length=exnode.logical_length,
                          mappings=tuple(mappings), parity_groups=tuple(groups),
                          attributes=dict(exnode.attributes))
        for g, group in enumerate(groups):
            pm = group.parity_member
            data = _try_read(pool, pm.read_cap(), pm.alloc_offset, group.block_length)
            expected = exnode.attributes.get(parity_digest_key(g))
            if data is not None and expected is not None \
                    and hashlib.sha256(data).hexdigest() != expected:
                data = None
            if data is not None:
                continue
            rebuilt = _rebuild_parity(repaired, pool, g, placer, policy.lease_seconds)
            if rebuilt is None:
                unrecoverable.append(-1 - g)
                continue
            groups[g] = rebuilt
        repaired = ExNode(logical_length=exnode.logical_length,
                          mappings=tuple(mappings), parity_groups=tuple(groups),
                          attributes=dict(exnode.attributes))
        if unrecoverable:
            exc = EbpError(E_UNRECOVERABLE,
                           f"{len(unrecoverable)} block(s) could not be rebuilt")
            exc.exnode = repaired
            raise exc
    return repaired


def _hosts_of_range(mappings: list[Mapping], target: Mapping,
                    except_index: int) -> set[str]:
    hosts = set()
    for i, m in enumerate(mappings):
        if i == except_index:
            continue
        if m.logical_offset == target.logical_offset and m.length == target.length:
            try:
                hosts.add(m.allocation()[0])
            except EbpError:
                pass
    return hosts


def _rebuild_parity(exnode: ExNode, pool: _DepotPool, group_index: int,
                    placer: _Placer, lease_seconds: int) -> Optional[ParityGroup]:
    """Recompute a lost parity block on a fresh depot via the XOR transform."""
    group = exnode.parity_groups[group_index]
    blocks: list[bytes] = []
    member_hosts: set[str] = set()
    for idx in group.data_members:
        if idx >= len(exnode.mappings):
            return None
        member = exnode.mappings[idx]
        data = _read_block_any_replica(exnode, pool, member, group.block_length,
                                       skip=set())
        if data is None:
            return None
        blocks.append(data)
        member_hosts |= _hosts_of_range(list(exnode.mappings), member,
                                        except_index=-1)
    replicas = min(
        sum(1 for m in exnode.mappings
            if m.logical_offset == exnode.mappings[idx].logical_offset
            and m.length == exnode.mappings[idx].length)
        for idx in group.data_members)
    tiers = [member_hosts] + ([set()] if replicas >= 2 else [])
    try:
        node, result = placer.place_tiered(group.block_length, lease_seconds,
                                           tiers)
    except EbpError:
        return None
    site = pool.for_node(node)
    scratch: list[CapabilitySet] = []
    try:
        inputs = []
        for data in blocks:
            caps = CapabilitySet(*site.allocate(group.block_length, lease_seconds))
            scratch.append(caps)
            site.write(caps.write, 0, data)
            inputs.append(caps.read)
        site.transform("parity/xor", inputs, [result.write],
                       {"length": group.block_length})
    except EbpError:
        _release_quietly(pool, result)
        return None
    finally:
        for caps in scratch:
            _release_quietly(pool, caps)
    first = exnode.mappings[group.data_members[0]]
    return ParityGroup(
        scheme="xor", block_length=group.block_length,
        data_members=group.data_members,
        parity_member=Mapping(
            logical_offset=first.logical_offset, length=group.block_length,
            alloc_offset=0, caps=_caps_to_uris(result), replica_index=0))


def multi_hop_transfer(src_cap: Capability, dst_node: str, graph: AdjacencyGraph,
                       directory: DepotDirectory, lease_seconds: int, length: int,
                       src_offset: int = 0, timeout: float = DEFAULT_TIMEOUT
                       ) -> tuple[CapabilitySet, TransferReport]:
    """Move ``length`` bytes hop by hop along the minimum-hop route.

    Each hop gets an equal-size allocation; an intermediate's buffer is
    released as soon as its successor confirms the bytes.  On a mid-path
    failure the raised error carries the partial report as ``exc.report``.
    """
    path = route(graph, src_cap.node_id, dst_node)
    report = TransferReport(path=path,
                            per_hop=[HopReport(node_id=n) for n in path])
    started = time.monotonic()
    # hops[j] is the allocation we created on path[hop_index(j)]
    hop_index = (lambda j: j) if len(path) == 1 else (lambda j: j + 1)
    with _DepotPool(directory, timeout) as pool:
        hops: list[CapabilitySet] = []
        prev_read = src_cap
        prev_offset = src_offset
        try:
            if len(path) == 1:
                caps = CapabilitySet(*pool.for_node(dst_node).allocate(
                    length, lease_seconds))
                hops.append(caps)
                report.per_hop[0].allocated = length
                moved = pool.for_cap(src_cap).transfer(src_cap, caps.write,
                                                       src_offset, 0, length)
                report.per_hop[0].transferred = moved
            else:
                for i, node in enumerate(path[1:], start=1):
                    caps = CapabilitySet(*pool.for_node(node).allocate(
                        length, lease_seconds))
                    hops.append(caps)
                    report.per_hop[i].allocated = length
                    moved = pool.for_cap(prev_read).transfer(
                        prev_read, caps.write, prev_offset, 0, length)
                    report.per_hop[i - 1].transferred = moved
                    if i >= 2:  # path[i-1] is an intermediate we own, now confirmed
                        if _release_quietly(pool, hops[i - 2]):
                            report.per_hop[i - 1].released = True
                    prev_read = caps.read
                    prev_offset = 0
        except EbpError as exc:
            for j, caps in enumerate(hops):
                hop = report.per_hop[hop_index(j)]
                if not hop.released and _release_quietly(pool, caps):
                    hop.released = True
            report.elapsed = time.monotonic() - started
            exc.report = report
            raise
        report.elapsed = time.monotonic() - started
        return hops[-1], report


def datagram_send(payload: bytes, ttl: int, path: list[str],
                  directory: DepotDirectory, lease_seconds: int = 60,
                  timeout: float = DEFAULT_TIMEOUT) -> DeliveryReport:
    """Push a one-byte-TTL datagram frame along ``path``.

    At every hop the TTL header byte is decremented in place via the
    forwarding transform before the frame moves one hop; a zero TTL drops
    the frame at that forward.  The delivered frame stays allocated on the
    final node (``dst_caps``) so the caller can read it back.
    """
    if not path:
        raise EbpError(E_PROTO, "path must name at least one node")
    if not 0 <= ttl <= 255:
        raise EbpError(E_PROTO, "ttl must fit in one byte")
    frame = bytes([ttl]) + payload
    report = DeliveryReport(path=list(path), delivered=False, hop_ttls=[ttl],
                            frame_length=len(frame))
    with _DepotPool(directory, timeout) as pool:
        current = CapabilitySet(*pool.for_node(path[0]).allocate(
            len(frame), lease_seconds))
        pool.for_node(path[0]).write(current.write, 0, frame)
        for forward, node in enumerate(path[1:], start=1):
            src_client = pool.for_cap(current.read)
            try:
                results = src_client.transform(
                    "dgram/forward", [current.read], [current.write],
                    {"ttl_offset": 0})
            except EbpError as exc:
                _release_quietly(pool, current)
                if exc.code == E_TTL:
                    report.drop_forward = forward
                    return report
                raise
            nxt = CapabilitySet(*pool.for_node(node).allocate(
                len(frame), lease_seconds))
            try:
                src_client.transfer(current.read, nxt.write, 0, 0, len(frame))
            except EbpError:
                _release_quietly(pool, current)
                _release_quietly(pool, nxt)
                raise
            report.hop_ttls.append(results[0])
            _release_quietly(pool, current)
            current = nxt
        report.delivered = True
        report.dst_caps = current
    return report


def store_exnode(inner: ExNode, depot_node: str, directory: DepotDirectory,
                 lease_seconds: int, timeout: float = DEFAULT_TIMEOUT) -> ExNode:
    """Write a serialized exNode into one data-plane allocation.

    Returns the wrapper exNode describing that allocation; fetching the
    wrapper and deserializing recovers the original document.
    """
    blob = xn.serialize(inner)
    with _DepotPool(directory, timeout) as pool:
        client = pool.for_node(depot_node)
        try:
            caps = CapabilitySet(*client.allocate(len(blob), lease_seconds))
        except EbpError as exc:
            if exc.code in (E_POLICY, E_NOSPACE):
                raise EbpError(E_NOSPACE,
                               f"depot {depot_node} cannot hold {len(blob)} bytes: "
                               f"{exc.message}") from None
            raise
        client.write(caps.write, 0, blob)
    return ExNode(
        logical_length=len(blob),
        mappings=(Mapping(logical_offset=0, length=len(blob), alloc_offset=0,
                          caps=_caps_to_uris(caps), replica_index=0),),
        attributes={
            ATTR_CONTENT: "exnode",
            ATTR_DIGEST: hashlib.sha256(blob).hexdigest(),
            range_digest_key(0, len(blob)): hashlib.sha256(blob).hexdigest(),
        },
    )


def fetch_exnode(wrapper: ExNode, directory: DepotDirectory,
                 timeout: float = DEFAULT_TIMEOUT) -> ExNode:
    """Inverse of :func:`store_exnode`."""
    return xn.deserialize(download(wrapper, directory, timeout=timeout))
