"""Structural metadata mapping a linear logical extent onto depot allocations.

An exNode plays the role an inode plays for a local file system: it binds
byte ranges of one logical extent to ranges inside remote allocations, named
only by capability URIs.  Replicas are overlapping mappings distinguished by
``replica_index``; XOR parity groups add single-loss recovery across equal
sized blocks.  The serialized form is canonical JSON (sorted keys, compact
separators, decimal integers) so documents are byte-stable.

All values here are immutable; operations are pure functions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from . import capability
from .capability import Capability
from .errors import E_HOLE, E_PROTO, E_RANGE, EbpError

VERSION = 1

_MAPPING_KEYS = {"alloc_offset", "caps", "length", "logical_offset", "replica_index"}
_GROUP_KEYS = {"block_length", "data_members", "parity_member", "scheme"}
_TOP_KEYS = {"attributes", "logical_length", "mappings", "parity_groups", "version"}
_CAP_KINDS = ("read", "write", "manage")


@dataclass(frozen=True)
class Mapping:
    """One logical byte range bound to a range inside one allocation."""

    logical_offset: int
    length: int
    alloc_offset: int
    caps: dict[str, str]  # kind -> capability URI; "read" is mandatory
    replica_index: int = 0

    def cap(self, kind: str) -> Optional[Capability]:
        uri = self.caps.get(kind)
        return capability.parse(uri) if uri else None

    def read_cap(self) -> Capability:
        return capability.parse(self.caps["read"])

    def allocation(self) -> tuple[str, str]:
        """(node_id, alloc_id) identity of the backing allocation."""
        cap = self.read_cap()
        return cap.node_id, cap.alloc_id

    @property
    def logical_end(self) -> int:
        return self.logical_offset + self.length


@dataclass(frozen=True)
class ParityGroup:
    """Equal-length data blocks plus one XOR parity block.

    ``data_members`` are indices into the parent exNode's mapping list; the
    parity member is carried inline because it covers no logical bytes of
    its own.  The protected range of each member is ``block_length`` bytes
    starting at the member's ``alloc_offset`` (the final block of an extent
    may map fewer logical bytes; its allocation tail is zero padding).
    """

    scheme: str
    block_length: int
    data_members: tuple[int, ...]
    parity_member: Mapping


@dataclass(frozen=True)
class ExNode:
    logical_length: int
    mappings: tuple[Mapping, ...] = ()
    parity_groups: tuple[ParityGroup, ...] = ()
    attributes: dict[str, str] = field(default_factory=dict)
    version: int = VERSION


@dataclass(frozen=True)
class ReadSource:
    """One replica able to serve a resolved segment."""

    mapping_index: int
    mapping: Mapping
    alloc_offset: int


@dataclass(frozen=True)
class Segment:
    """A maximal run of the requested range with a fixed set of replicas."""

    offset: int
    length: int
    sources: tuple[ReadSource, ...]  # ranked by replica_index, then mapping order


def validate(exnode: ExNode) -> list[str]:
    """Check structural invariants; returns human-readable violations."""
    violations = []
    if exnode.version != VERSION:
        violations.append(f"unsupported version {exnode.version}")
    if exnode.logical_length < 0:
        violations.append("logical_length is negative")
    for i, m in enumerate(exnode.mappings):
        violations.extend(_check_mapping(m, f"mapping {i}", exnode.logical_length))
    for g, group in enumerate(exnode.parity_groups):
        label = f"parity group {g}"
        if group.scheme != "xor":
            violations.append(f"{label}: unknown scheme {group.scheme!r}")
        if group.block_length <= 0:
            violations.append(f"{label}: block_length must be positive")
            continue
        if not group.data_members:
            violations.append(f"{label}: no data members")
        if len(set(group.data_members)) != len(group.data_members):
            violations.append(f"{label}: duplicate data member indices")
        violations.extend(_check_mapping(group.parity_member, f"{label} parity member",
                                         logical_length=None))
        if group.parity_member.length != group.block_length:
            violations.append(f"{label}: parity length differs from block_length")
        allocations = []
        try:
            allocations.append(group.parity_member.allocation())
        except EbpError:
            pass
        for idx in group.data_members:
            if not 0 <= idx < len(exnode.mappings):
                violations.append(f"{label}: member index {idx} out of range")
                continue
            member = exnode.mappings[idx]
            expected = min(group.block_length,
                           max(exnode.logical_length - member.logical_offset, 0))
            if member.length != expected:
                violations.append(
                    f"{label}: member {idx} length {member.length} does not match "
                    f"block_length {group.block_length}")
            try:
                allocations.append(member.allocation())
            except EbpError:
                pass
        if len(set(allocations)) != len(allocations):
            violations.append(f"{label}: members share an allocation")
    return violations


def _check_mapping(m: Mapping, label: str, logical_length: Optional[int]) -> list[str]:
    violations = []
    if m.length <= 0:
        violations.append(f"{label}: length must be positive")
    if m.logical_offset < 0 or m.alloc_offset < 0:
        violations.append(f"{label}: negative offset")
    if m.replica_index < 0:
        violations.append(f"{label}: negative replica_index")
    if logical_length is not None and m.logical_offset + m.length > logical_length:
        violations.append(f"{label}: extends past logical_length")
    if "read" not in m.caps:
        violations.append(f"{label}: missing read capability")
    for kind, uri in m.caps.items():
        if kind not in _CAP_KINDS:
            violations.append(f"{label}: unknown capability kind {kind!r}")
            continue
        try:
            capability.parse(uri)
        except EbpError:
            violations.append(f"{label}: {kind} capability URI does not parse")
    return violations


def is_complete(exnode: ExNode) -> bool:
    return not coverage_holes(exnode)


def coverage_holes(exnode: ExNode) -> list[tuple[int, int]]:
    """Minimal sorted disjoint [start, end) ranges covered by no mapping."""
    length = exnode.logical_length
    if length == 0:
        return []
    intervals = sorted((m.logical_offset, m.logical_end) for m in exnode.mappings)
    holes = []
    cursor = 0
    for start, end in intervals:
        if start > cursor:
            holes.append((cursor, min(start, length)))
        cursor = max(cursor, end)
        if cursor >= length:
            break
    if cursor < length:
        holes.append((cursor, length))
    return holes


def resolve(exnode: ExNode, offset: int, length: int) -> list[Segment]:
    """Plan a read of [offset, offset+length): ordered segments that exactly
    partition the range, each listing every replica able to serve it."""
    if offset < 0 or length < 0 or offset + length > exnode.logical_length:
        raise EbpError(E_RANGE, "requested range outside the logical extent")
    if length == 0:
        return []
    end = offset + length
    boundaries = {offset, end}
    for m in exnode.mappings:
        if m.logical_end > offset and m.logical_offset < end:
            boundaries.add(max(m.logical_offset, offset))
            boundaries.add(min(m.logical_end, end))
    points = sorted(boundaries)
    segments = []
    for seg_start, seg_end in zip(points, points[1:]):
        sources = []
        for i, m in enumerate(exnode.mappings):
            if m.logical_offset <= seg_start and m.logical_end >= seg_end:
                sources.append(
                    ReadSource(i, m, m.alloc_offset + (seg_start - m.logical_offset)))
        if not sources:
            raise EbpError(E_HOLE,
                           f"range [{seg_start}, {seg_end}) is not covered")
        sources.sort(key=lambda s: (s.mapping.replica_index, s.mapping_index))
        segments.append(Segment(seg_start, seg_end - seg_start, tuple(sources)))
    return segments


# -- canonical JSON form -----------------------------------------------------

def _mapping_to_obj(m: Mapping) -> dict:
    return {
        "alloc_offset": m.alloc_offset,
        "caps": {k: m.caps[k] for k in sorted(m.caps)},
        "length": m.length,
        "logical_offset": m.logical_offset,
        "replica_index": m.replica_index,
    }


def _group_to_obj(g: ParityGroup) -> dict:
    return {
        "block_length": g.block_length,
        "data_members": list(g.data_members),
        "parity_member": _mapping_to_obj(g.parity_member),
        "scheme": g.scheme,
    }


def serialize(exnode: ExNode) -> bytes:
    doc = {
        "attributes": {str(k): str(v) for k, v in sorted(exnode.attributes.items())},
        "logical_length": exnode.logical_length,
        "mappings": [_mapping_to_obj(m) for m in exnode.mappings],
        "parity_groups": [_group_to_obj(g) for g in exnode.parity_groups],
        "version": exnode.version,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _want_uint(obj: dict, key: str, label: str) -> int:
    value = obj.get(key)
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise EbpError(E_PROTO, f"{label}.{key} must be a nonnegative integer")
    return value


def _mapping_from_obj(obj, label: str) -> Mapping:
    if not isinstance(obj, dict):
        raise EbpError(E_PROTO, f"{label} must be an object")
    if set(obj) != _MAPPING_KEYS:
        raise EbpError(E_PROTO, f"{label} must have exactly keys {sorted(_MAPPING_KEYS)}")
    caps = obj["caps"]
    if not isinstance(caps, dict) or "read" not in caps:
        raise EbpError(E_PROTO, f"{label}.caps must be an object with a read URI")
    clean_caps = {}
    for kind, uri in caps.items():
        if kind not in _CAP_KINDS or not isinstance(uri, str):
            raise EbpError(E_PROTO, f"{label}.caps has a bad entry {kind!r}")
        capability.parse(uri)  # raises E_PROTO on malformed URIs
        clean_caps[kind] = uri
    return Mapping(
        logical_offset=_want_uint(obj, "logical_offset", label),
        length=_want_uint(obj, "length", label),
        alloc_offset=_want_uint(obj, "alloc_offset", label),
        caps=clean_caps,
        replica_index=_want_uint(obj, "replica_index", label),
    )


def deserialize(data: bytes) -> ExNode:
    """Parse a canonical exNode document; E_PROTO on any schema violation."""
    try:
        doc = json.loads(data.decode("utf-8"))
    except (ValueError, UnicodeDecodeError):
        raise EbpError(E_PROTO, "exnode document is not valid JSON") from None
    if not isinstance(doc, dict):
        raise EbpError(E_PROTO, "exnode document must be a JSON object")
    if set(doc) != _TOP_KEYS:
        raise EbpError(E_PROTO, f"exnode document must have exactly keys {sorted(_TOP_KEYS)}")
    if doc["version"] != VERSION:
        raise EbpError(E_PROTO, f"unknown exnode version {doc['version']!r}")
    logical_length = _want_uint(doc, "logical_length", "exnode")
    if not isinstance(doc["mappings"], list) or not isinstance(doc["parity_groups"], list):
        raise EbpError(E_PROTO, "mappings and parity_groups must be arrays")
    mappings = tuple(_mapping_from_obj(o, f"mappings[{i}]")
                     for i, o in enumerate(doc["mappings"]))
    groups = []
    for g, obj in enumerate(doc["parity_groups"]):
        label = f"parity_groups[{g}]"
        if not isinstance(obj, dict) or set(obj) != _GROUP_KEYS:
            raise EbpError(E_PROTO, f"{label} must have exactly keys {sorted(_GROUP_KEYS)}")
        if obj["scheme"] != "xor":
            raise EbpError(E_PROTO, f"{label}.scheme must be 'xor'")
        members = obj["data_members"]
        if (not isinstance(members, list)
                or any(isinstance(i, bool) or not isinstance(i, int) or i < 0
                       for i in members)):
            raise EbpError(E_PROTO, f"{label}.data_members must be an index array")
        groups.append(ParityGroup(
            scheme="xor",
            block_length=_want_uint(obj, "block_length", label),
            data_members=tuple(members),
            parity_member=_mapping_from_obj(obj["parity_member"],
                                            f"{label}.parity_member"),
        ))
    attributes = doc["attributes"]
    if (not isinstance(attributes, dict)
            or any(not isinstance(k, str) or not isinstance(v, str)
                   for k, v in attributes.items())):
        raise EbpError(E_PROTO, "attributes must map strings to strings")
    return ExNode(
        logical_length=logical_length,
        mappings=mappings,
        parity_groups=tuple(groups),
        attributes=dict(attributes),
        version=VERSION,
    )


def overhead_ratio(exnode: ExNode) -> float:
    """Serialized metadata size as a fraction of the logical payload size."""
    if exnode.logical_length <= 0:
        raise EbpError(E_PROTO, "overhead ratio needs a positive logical_length")
    return len(serialize(exnode)) / exnode.logical_length
