"""Node-local buffer transformations and their per-depot registry.

A transform runs synchronously inside the depot that holds all of its input
and output buffers; the registry maps global operation names of the form
``<family>/<op>`` to implementations that were installed on the node ahead
of time (no mobile code).  Implementations receive buffer views and a
parameter map, and return one integer per output buffer (bytes written, or
the new TTL for ``dgram/forward``).
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field
from functools import reduce
from typing import Callable, Optional, Protocol

from .errors import (E_OP, E_OVERLAP, E_PROTO, E_RANGE, E_TTL, EbpError)


class BufferView(Protocol):
    """Access the depot grants a transform to one allocation."""

    alloc_id: str
    size: int

    def read(self, offset: int, length: int) -> bytes: ...

    def write(self, offset: int, data: bytes) -> int: ...


TransformImpl = Callable[[list, list, dict], list]


@dataclass(frozen=True)
class TransformSpec:
    """Declared shape of a registered operation.

    ``n_inputs`` of None means variadic with at least one input.
    """

    name: str
    n_inputs: Optional[int]
    n_outputs: int
    params_schema: dict = field(default_factory=dict)
    pure: bool = True


class TransformRegistry:
    """Per-depot name -> (spec, implementation) table."""

    def __init__(self):
        self._lock = threading.Lock()
        self._entries: dict[str, tuple[TransformSpec, TransformImpl]] = {}

    def register(self, spec: TransformSpec, impl: TransformImpl) -> None:
        with self._lock:
            if spec.name in self._entries:
                raise EbpError(E_OP, f"transform {spec.name!r} already registered")
            self._entries[spec.name] = (spec, impl)

    def lookup(self, name: str) -> TransformSpec:
        entry = self._entries.get(name)
        if entry is None:
            raise EbpError(E_OP, f"unknown transform {name!r}")
        return entry[0]

    def resolve(self, name: str) -> tuple[TransformSpec, TransformImpl]:
        entry = self._entries.get(name)
        if entry is None:
            raise EbpError(E_OP, f"unknown transform {name!r}")
        return entry

    def names(self) -> list[str]:
        return sorted(self._entries)


def encode_params(params: dict) -> bytes:
    """Canonical JSON: sorted keys, no insignificant whitespace."""
    return json.dumps(params, sort_keys=True, separators=(",", ":")).encode("utf-8")


def decode_params(body: bytes) -> dict:
    if body == b"":
        return {}
    try:
        params = json.loads(body.decode("utf-8"))
    except (ValueError, UnicodeDecodeError):
        raise EbpError(E_PROTO, "transform params are not valid JSON") from None
    if not isinstance(params, dict):
        raise EbpError(E_PROTO, "transform params must be a JSON object")
    return params


def _int_param(params: dict, name: str, default: Optional[int]) -> int:
    value = params.get(name, default)
    if value is None:
        raise EbpError(E_PROTO, f"transform param {name!r} is required")
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise EbpError(E_PROTO, f"transform param {name!r} must be a nonnegative integer")
    return value


def _reject_unknown(params: dict, allowed: set[str]) -> None:
    unknown = set(params) - allowed
    if unknown:
        raise EbpError(E_PROTO, f"unknown transform params: {sorted(unknown)}")


def _xor_impl(inputs: list, outputs: list, params: dict) -> list:
    _reject_unknown(params, {"length"})
    if "length" in params:
        length = _int_param(params, "length", None)
    else:
        sizes = {view.size for view in inputs}
        if len(sizes) != 1:
            raise EbpError(E_RANGE, "inputs differ in size and no length param given")
        length = sizes.pop()
    for view in inputs:
        if length > view.size:
            raise EbpError(E_RANGE, f"effective length {length} exceeds input size {view.size}")
    out = outputs[0]
    if out.size < length:
        raise EbpError(E_RANGE, f"output smaller than effective length {length}")
    acc = reduce(
        lambda a, b: a ^ b,
        (int.from_bytes(view.read(0, length), "big") for view in inputs),
    )
    out.write(0, acc.to_bytes(length, "big") if length else b"")
    return [length]


def _sha256_impl(inputs: list, outputs: list, params: dict) -> list:
    _reject_unknown(params, {"offset", "length"})
    src = inputs[0]
    offset = _int_param(params, "offset", 0)
    if offset > src.size:
        raise EbpError(E_RANGE, "digest offset beyond input")
    length = _int_param(params, "length", src.size - offset)
    if offset + length > src.size:
        raise EbpError(E_RANGE, "digest range exceeds input")
    out = outputs[0]
    if out.size < 32:
        raise EbpError(E_RANGE, "digest output must hold 32 bytes")
    out.write(0, hashlib.sha256(src.read(offset, length)).digest())
    return [32]


def _copy_impl(inputs: list, outputs: list, params: dict) -> list:
    _reject_unknown(params, {"src_off", "dst_off", "length"})
    src, dst = inputs[0], outputs[0]
    src_off = _int_param(params, "src_off", 0)
    dst_off = _int_param(params, "dst_off", 0)
    if src_off > src.size:
        raise EbpError(E_RANGE, "copy source offset beyond input")
    length = _int_param(params, "length", src.size - src_off)
    if src_off + length > src.size or dst_off + length > dst.size:
        raise EbpError(E_RANGE, "copy range out of bounds")
    if src.alloc_id == dst.alloc_id and length > 0:
        if src_off < dst_off + length and dst_off < src_off + length:
            raise EbpError(E_OVERLAP, "same-allocation copy ranges overlap")
    if length:
        dst.write(dst_off, src.read(src_off, length))
    return [length]


def _forward_impl(inputs: list, outputs: list, params: dict) -> list:
    _reject_unknown(params, {"ttl_offset"})
    src, dst = inputs[0], outputs[0]
    if src.alloc_id != dst.alloc_id:
        raise EbpError(E_PROTO, "dgram/forward needs paired capabilities on one buffer")
    ttl_offset = _int_param(params, "ttl_offset", 0)
    if ttl_offset >= src.size:
        raise EbpError(E_RANGE, "ttl offset beyond buffer")
    ttl = src.read(ttl_offset, 1)[0]
    if ttl == 0:
        raise EbpError(E_TTL, "ttl already zero")
    dst.write(ttl_offset, bytes([ttl - 1]))
    return [ttl - 1]


BUILTINS: tuple[tuple[TransformSpec, TransformImpl], ...] = (
    (TransformSpec("parity/xor", None, 1,
                   {"length": "effective input length, defaults to common size"}),
     _xor_impl),
    (TransformSpec("digest/sha256", 1, 1,
                   {"offset": "start of digested range (0)",
                    "length": "bytes digested (rest of input)"}),
     _sha256_impl),
    (TransformSpec("copy/range", 1, 1,
                   {"src_off": "source offset (0)",
                    "dst_off": "destination offset (0)",
                    "length": "bytes copied (rest of input)"}),
     _copy_impl),
    (TransformSpec("dgram/forward", 1, 1,
                   {"ttl_offset": "position of the TTL byte (0)"}),
     _forward_impl),
)


def default_registry() -> TransformRegistry:
    registry = TransformRegistry()
    for spec, impl in BUILTINS:
        registry.register(spec, impl)
    return registry
