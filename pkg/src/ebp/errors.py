"""Error codes shared by the depot protocol and the client-side services.

Codes travel on the wire as the first token of an ``ERR`` response, so they
are plain strings rather than exception subclasses.
"""

from __future__ import annotations

# Depot / wire-level codes.
E_CAP = "E_CAP"            # key mismatch or unknown allocation
E_EXPIRED = "E_EXPIRED"    # allocation lease has lapsed
E_NOSPACE = "E_NOSPACE"    # depot total capacity exhausted
E_POLICY = "E_POLICY"      # operator cap exceeded (size, duration, transfer)
E_ADJ = "E_ADJ"            # transfer destination not an allowed adjacency
E_OP = "E_OP"              # unknown/duplicate transform operation
E_LOCAL = "E_LOCAL"        # capability names a different node
E_ARITY = "E_ARITY"        # transform input/output count mismatch
E_PROTO = "E_PROTO"        # malformed frame, URI, config, or argument
E_RANGE = "E_RANGE"        # offset/length outside allocation bounds
E_NET = "E_NET"            # connection failure (best-effort, caller retries)
E_INTERNAL = "E_INTERNAL"  # unexpected server-side failure

# Transform-specific codes (surface through the TRANSFORM verb).
E_TTL = "E_TTL"            # datagram TTL already zero
E_OVERLAP = "E_OVERLAP"    # same-allocation copy with overlapping ranges

# Control-plane / topology codes (never produced by a depot).
E_HOLE = "E_HOLE"                    # logical range not fully covered
E_UNRECOVERABLE = "E_UNRECOVERABLE"  # no replica and parity cannot rebuild
E_DIGEST = "E_DIGEST"                # checksum mismatch
E_NOROUTE = "E_NOROUTE"              # no directed path in adjacency graph
E_UNKNOWN_NODE = "E_UNKNOWN_NODE"    # node_id absent from directory
E_BIND = "E_BIND"                    # listen endpoint unavailable

ALL_CODES = frozenset({
    E_CAP, E_EXPIRED, E_NOSPACE, E_POLICY, E_ADJ, E_OP, E_LOCAL, E_ARITY,
    E_PROTO, E_RANGE, E_NET, E_INTERNAL, E_TTL, E_OVERLAP, E_HOLE,
    E_UNRECOVERABLE, E_DIGEST, E_NOROUTE, E_UNKNOWN_NODE, E_BIND,
})


class EbpError(Exception):
    """Operation failure carrying a wire error code and one-line message."""

    def __init__(self, code: str, message: str = ""):
        self.code = code
        self.message = message.replace("\n", " ").strip()
        super().__init__(f"{code} {self.message}".strip())
