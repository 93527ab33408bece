"""Framing for the depot's RPC-over-TCP protocol.

Frames are a UTF-8 header line of space-separated tokens terminated by a
single ``\\n``, optionally followed by a raw binary body whose length is
declared by a header token::

    EBP/0.1 ALLOCATE <size> <duration>
    EBP/0.1 WRITE <alloc_id> <key> <offset> <length>   (+ <length> body bytes)
    EBP/0.1 READ <alloc_id> <key> <offset> <length>
    EBP/0.1 MANAGE <alloc_id> <key> <PROBE|EXTEND|RELEASE> [<duration>]
    EBP/0.1 TRANSFER <src_alloc_id> <src_key> <dst_cap_uri> <src_off> <dst_off> <length>
    EBP/0.1 TRANSFORM <op_name> <n_in> <n_out> <cap_uri>... <params_length>  (+ body)

Responses are ``OK <tokens...>`` (plus a body for READ, whose first token is
the byte count) or ``ERR <code> <message>``.  Keys travel as unpadded
base64url; argument tokens stay strings here so that encode/decode round-trip
bit-exactly; the depot layer converts validated integer tokens.

The codec is pure: decoders consume exactly one frame from a binary stream
and raise :class:`EbpError` with ``E_PROTO`` on any malformed input.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import BinaryIO, Optional

from . import capability
from .errors import E_PROTO, EbpError

PROTOCOL_TAG = "EBP/0.1"
MAX_HEADER_BYTES = 4096
MAX_BODY_BYTES = 1 << 62  # declared lengths above this are rejected outright
MAX_TRANSFORM_CAPS = 64

VERB_ALLOCATE = "ALLOCATE"
VERB_WRITE = "WRITE"
VERB_READ = "READ"
VERB_MANAGE = "MANAGE"
VERB_TRANSFER = "TRANSFER"
VERB_TRANSFORM = "TRANSFORM"
VERBS = (VERB_ALLOCATE, VERB_WRITE, VERB_READ, VERB_MANAGE, VERB_TRANSFER,
         VERB_TRANSFORM)

MANAGE_PROBE = "PROBE"
MANAGE_EXTEND = "EXTEND"
MANAGE_RELEASE = "RELEASE"
MANAGE_ACTIONS = (MANAGE_PROBE, MANAGE_EXTEND, MANAGE_RELEASE)

STATUS_OK = "OK"
STATUS_ERR = "ERR"

_UINT_RE = re.compile(r"(0|[1-9][0-9]*)\Z")
_NAME_RE = re.compile(r"[A-Za-z0-9_./-]+\Z")
_CODE_RE = re.compile(r"E_[A-Z0-9_]+\Z")
_TOKEN_RE = re.compile(r"[\x21-\x7e]+\Z")  # printable ASCII, no spaces


@dataclass(frozen=True)
class Request:
    verb: str
    args: tuple[str, ...]
    body: Optional[bytes] = None


@dataclass(frozen=True)
class Response:
    status: str
    tokens: tuple[str, ...] = ()
    body: Optional[bytes] = None
    # ERR only:
    error_code: str = ""
    error_message: str = ""

    @classmethod
    def ok(cls, *tokens: object, body: Optional[bytes] = None) -> "Response":
        return cls(STATUS_OK, tuple(str(t) for t in tokens), body)

    @classmethod
    def err(cls, code: str, message: str) -> "Response":
        # collapse all whitespace runs: the header grammar forbids doubled
        # separators, and messages often embed OS error text
        message = " ".join(message.split()) or "error"
        return cls(STATUS_ERR, error_code=code, error_message=message[:1024])


def _proto(msg: str) -> EbpError:
    return EbpError(E_PROTO, msg)


def format_seconds(value: float) -> str:
    """Render an epoch-seconds value compactly; integral values lose the dot."""
    if float(value).is_integer():
        return str(int(value))
    return repr(float(value))


def parse_seconds(token: str) -> float:
    try:
        value = float(token)
    except ValueError:
        raise _proto(f"expected a seconds value, got {token!r}") from None
    if value != value or value in (float("inf"), float("-inf")):
        raise _proto(f"non-finite seconds value {token!r}")
    return value


def parse_uint(token: str) -> int:
    if not _UINT_RE.match(token):
        raise _proto(f"expected unsigned integer, got {token!r}")
    value = int(token)
    if value > MAX_BODY_BYTES:
        raise _proto(f"integer token too large: {token}")
    return value


def _check_name(token: str, what: str) -> str:
    if not _NAME_RE.match(token):
        raise _proto(f"bad {what}: {token!r}")
    return token


def _check_key(token: str) -> str:
    capability.decode_key(token)  # raises E_PROTO for bad length/encoding
    return token


def _check_uri(token: str) -> str:
    capability.parse(token)
    return token


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining > 0:
        chunk = stream.read(remaining)
        if not chunk:
            raise _proto(f"truncated body: wanted {n} bytes, short by {remaining}")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def _read_header(stream: BinaryIO) -> Optional[list[str]]:
    """Read one header line; None on clean EOF before any byte."""
    line = stream.readline(MAX_HEADER_BYTES + 1)
    if line == b"":
        return None
    if len(line) > MAX_HEADER_BYTES:
        raise _proto(f"header exceeds {MAX_HEADER_BYTES} bytes")
    if not line.endswith(b"\n"):
        raise _proto("header line not terminated")
    try:
        text = line[:-1].decode("utf-8")
    except UnicodeDecodeError:
        raise _proto("header is not valid UTF-8") from None
    if text != text.strip(" ") or "  " in text or "\r" in text or "\t" in text:
        raise _proto("malformed token separation in header")
    fields = text.split(" ")
    if any(f == "" for f in fields):
        raise _proto("empty token in header")
    return fields


def _validate_request(verb: str, args: list[str]) -> int:
    """Check verb-specific token grammar; returns declared body length."""
    if verb == VERB_ALLOCATE:
        if len(args) != 2:
            raise _proto("ALLOCATE takes <size> <duration>")
        parse_uint(args[0])
        parse_uint(args[1])
        return 0
    if verb in (VERB_WRITE, VERB_READ):
        if len(args) != 4:
            raise _proto(f"{verb} takes <alloc_id> <key> <offset> <length>")
        _check_name(args[0], "alloc_id")
        _check_key(args[1])
        parse_uint(args[2])
        length = parse_uint(args[3])
        return length if verb == VERB_WRITE else 0
    if verb == VERB_MANAGE:
        if len(args) not in (3, 4):
            raise _proto("MANAGE takes <alloc_id> <key> <action> [<duration>]")
        _check_name(args[0], "alloc_id")
        _check_key(args[1])
        action = args[2]
        if action not in MANAGE_ACTIONS:
            raise _proto(f"unknown MANAGE action {action!r}")
        if action == MANAGE_EXTEND:
            if len(args) != 4:
                raise _proto("MANAGE EXTEND requires <duration>")
            parse_uint(args[3])
        elif len(args) != 3:
            raise _proto(f"MANAGE {action} takes no <duration>")
        return 0
    if verb == VERB_TRANSFER:
        if len(args) != 6:
            raise _proto("TRANSFER takes <src_alloc_id> <src_key> <dst_cap_uri>"
                         " <src_off> <dst_off> <length>")
        _check_name(args[0], "alloc_id")
        _check_key(args[1])
        _check_uri(args[2])
        parse_uint(args[3])
        parse_uint(args[4])
        parse_uint(args[5])
        return 0
    if verb == VERB_TRANSFORM:
        if len(args) < 4:
            raise _proto("TRANSFORM takes <op_name> <n_in> <n_out> <cap_uri>..."
                         " <params_length>")
        _check_name(args[0], "op_name")
        n_in = parse_uint(args[1])
        n_out = parse_uint(args[2])
        if n_in + n_out > MAX_TRANSFORM_CAPS:
            raise _proto("too many transform capabilities")
        if len(args) != 3 + n_in + n_out + 1:
            raise _proto("TRANSFORM capability count does not match arity tokens")
        for uri in args[3:3 + n_in + n_out]:
            _check_uri(uri)
        return parse_uint(args[-1])
    raise _proto(f"unknown verb {verb!r}")


def encode_request(req: Request) -> bytes:
    body_len = _validate_request(req.verb, list(req.args))
    has_body_slot = req.verb in (VERB_WRITE, VERB_TRANSFORM)
    if has_body_slot and req.body is None:
        raise _proto(f"{req.verb} requires a body")
    if not has_body_slot and req.body is not None:
        raise _proto(f"{req.verb} takes no body")
    body = req.body or b""
    if len(body) != body_len:
        raise _proto(f"body length {len(body)} does not match declared {body_len}")
    header = " ".join((PROTOCOL_TAG, req.verb) + tuple(req.args))
    if len(header) + 1 > MAX_HEADER_BYTES:
        raise _proto("header would exceed size limit")
    return header.encode("utf-8") + b"\n" + body


def decode_request(stream: BinaryIO) -> Optional[Request]:
    """Decode exactly one request frame; None on clean EOF."""
    fields = _read_header(stream)
    if fields is None:
        return None
    if len(fields) < 2:
        raise _proto("request header needs a protocol tag and a verb")
    if fields[0] != PROTOCOL_TAG:
        raise _proto(f"unsupported protocol tag {fields[0]!r}")
    verb, args = fields[1], fields[2:]
    body_len = _validate_request(verb, args)
    body = _read_exact(stream, body_len) if body_len else (b"" if verb in (VERB_WRITE, VERB_TRANSFORM) else None)
    return Request(verb, tuple(args), body)


def encode_response(resp: Response) -> bytes:
    if resp.status == STATUS_OK:
        for t in resp.tokens:
            if not _TOKEN_RE.match(t):
                raise _proto(f"bad response token {t!r}")
        header = "OK" + ("".join(" " + t for t in resp.tokens))
        body = resp.body or b""
        if resp.body is not None:
            if not resp.tokens or parse_uint(resp.tokens[0]) != len(body):
                raise _proto("OK-with-body must declare body length as first token")
        if len(header) + 1 > MAX_HEADER_BYTES:
            raise _proto("response header would exceed size limit")
        return header.encode("utf-8") + b"\n" + body
    if resp.status == STATUS_ERR:
        if not _CODE_RE.match(resp.error_code):
            raise _proto(f"bad error code {resp.error_code!r}")
        message = resp.error_message.replace("\n", " ").strip()
        if not message:
            raise _proto("ERR response requires a message")
        header = f"ERR {resp.error_code} {message}"
        if len(header.encode("utf-8")) + 1 > MAX_HEADER_BYTES:
            raise _proto("ERR response header would exceed size limit")
        return header.encode("utf-8") + b"\n"
    raise _proto(f"unknown response status {resp.status!r}")


def decode_response(stream: BinaryIO, body_expected: bool = False) -> Optional[Response]:
    """Decode one response frame; ``body_expected`` selects the READ shape.

    Frames do not self-describe whether an OK carries bytes, so the caller
    (which always knows the verb it sent) passes ``body_expected=True`` when
    the success shape is ``OK <length>`` followed by raw bytes.
    """
    fields = _read_header(stream)
    if fields is None:
        return None
    status = fields[0]
    if status == STATUS_OK:
        tokens = fields[1:]
        body = None
        if body_expected:
            if not tokens:
                raise _proto("OK-with-body must declare a length token")
            body = _read_exact(stream, parse_uint(tokens[0]))
        return Response(STATUS_OK, tuple(tokens), body)
    if status == STATUS_ERR:
        if len(fields) < 3:
            raise _proto("ERR response requires a code and a message")
        code = fields[1]
        if not _CODE_RE.match(code):
            raise _proto(f"bad error code {code!r}")
        return Response(STATUS_ERR, error_code=code,
                        error_message=" ".join(fields[2:]))
    raise _proto(f"unknown response status {status!r}")
