"""Capability references: unforgeable random-key names for depot allocations.

A capability is the only name by which an allocation can be reached.  It
binds a node, an endpoint to dial, an allocation id, a 16-byte key, and the
access kind the key authorizes.  Capabilities round-trip losslessly through
their URI form::

    ebp://<host>:<port>/<node_id>/<alloc_id>/<base64url(key)>/<read|write|manage>
"""

from __future__ import annotations

import base64
import binascii
import hmac
import re
import secrets
from dataclasses import dataclass
from typing import Callable

from .errors import E_PROTO, EbpError

KEY_BYTES = 16

KIND_READ = "read"
KIND_WRITE = "write"
KIND_MANAGE = "manage"
KINDS = (KIND_READ, KIND_WRITE, KIND_MANAGE)

_NODE_ID_RE = re.compile(r"[a-z0-9-]+\Z")
_TOKEN_RE = re.compile(r"[A-Za-z0-9_-]+\Z")
_URI_RE = re.compile(
    r"ebp://(?P<host>[^:/\s]+):(?P<port>\d{1,5})"
    r"/(?P<node_id>[a-z0-9-]+)"
    r"/(?P<alloc_id>[A-Za-z0-9_-]+)"
    r"/(?P<key>[A-Za-z0-9_-]{22})"
    r"/(?P<kind>read|write|manage)\Z"
)


def encode_key(key: bytes) -> str:
    """Render a 16-byte key as unpadded base64url (22 characters)."""
    if len(key) != KEY_BYTES:
        raise EbpError(E_PROTO, f"key must be {KEY_BYTES} bytes")
    return base64.urlsafe_b64encode(key).rstrip(b"=").decode("ascii")


def decode_key(token: str) -> bytes:
    """Parse an unpadded base64url key token; reject non-canonical forms."""
    if len(token) != 22 or not _TOKEN_RE.match(token):
        raise EbpError(E_PROTO, "key token must be 22 base64url characters")
    try:
        key = base64.b64decode(token + "==", altchars=b"-_", validate=True)
    except (binascii.Error, ValueError):
        raise EbpError(E_PROTO, "key token is not valid base64url") from None
    if len(key) != KEY_BYTES or encode_key(key) != token:
        raise EbpError(E_PROTO, "key token is not canonical")
    return key


@dataclass(frozen=True)
class Capability:
    """One allocation name with one access kind."""

    node_id: str
    endpoint: str  # host:port the owning depot serves on
    alloc_id: str
    key: bytes
    kind: str

    def to_uri(self) -> str:
        return (
            f"ebp://{self.endpoint}/{self.node_id}/{self.alloc_id}"
            f"/{encode_key(self.key)}/{self.kind}"
        )

    def __str__(self) -> str:
        return self.to_uri()


def mint(
    node_id: str,
    endpoint: str,
    alloc_id: str,
    kind: str,
    randomness_source: Callable[[int], bytes] = secrets.token_bytes,
) -> Capability:
    """Mint a capability with a fresh random key.

    ``randomness_source`` must be cryptographically strong in production;
    the simulation harness substitutes a seeded generator for reproducible
    runs.
    """
    if kind not in KINDS:
        raise EbpError(E_PROTO, f"unknown capability kind {kind!r}")
    return Capability(node_id, endpoint, alloc_id, randomness_source(KEY_BYTES), kind)


def parse(uri: str) -> Capability:
    """Parse a capability URI; raises E_PROTO on any malformation."""
    m = _URI_RE.match(uri)
    if m is None:
        raise EbpError(E_PROTO, f"malformed capability URI: {uri!r}")
    port = int(m.group("port"))
    if not 1 <= port <= 65535:
        raise EbpError(E_PROTO, f"port out of range in capability URI: {port}")
    key = decode_key(m.group("key"))
    return Capability(
        node_id=m.group("node_id"),
        endpoint=f"{m.group('host')}:{port}",
        alloc_id=m.group("alloc_id"),
        key=key,
        kind=m.group("kind"),
    )


def to_uri(cap: Capability) -> str:
    return cap.to_uri()


def verify(presented_key: bytes, stored_key: bytes) -> bool:
    """Constant-time key comparison; True iff byte-equal."""
    return hmac.compare_digest(presented_key, stored_key)


def valid_node_id(node_id: str) -> bool:
    return bool(_NODE_ID_RE.match(node_id))
