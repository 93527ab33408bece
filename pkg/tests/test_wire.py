import io
import random
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from ebp import wire
from ebp.capability import encode_key
from ebp.errors import ALL_CODES, E_PROTO, EbpError

GOLDEN = Path(__file__).parent / "golden"

A11 = "A" * 11
K22 = "A" * 22
B11 = "B" * 11
URI_R = f"ebp://127.0.0.1:6714/d0/{A11}/{K22}/read"
URI_W = f"ebp://127.0.0.1:6714/d0/{A11}/{K22}/write"
URI_M = f"ebp://127.0.0.1:6714/d0/{A11}/{K22}/manage"
URI_W_REMOTE = f"ebp://127.0.0.1:6715/d1/{B11}/{K22}/write"
URI_P = f"ebp://127.0.0.1:6714/d0/{B11}/{K22}/write"

GOLDEN_REQUESTS = {
    "req_allocate.bin": wire.Request("ALLOCATE", ("1024", "60")),
    "req_write.bin": wire.Request("WRITE", (A11, K22, "0", "3"), b"abc"),
    "req_read.bin": wire.Request("READ", (A11, K22, "0", "4")),
    "req_manage_probe.bin": wire.Request("MANAGE", (A11, K22, "PROBE")),
    "req_manage_extend.bin": wire.Request("MANAGE", (A11, K22, "EXTEND", "120")),
    "req_manage_release.bin": wire.Request("MANAGE", (A11, K22, "RELEASE")),
    "req_transfer.bin": wire.Request(
        "TRANSFER", (A11, K22, URI_W_REMOTE, "0", "0", "1024")),
    "req_transform.bin": wire.Request(
        "TRANSFORM", ("parity/xor", "2", "1", URI_R, URI_R, URI_P, "13"),
        b'{"length":64}'),
}

GOLDEN_RESPONSES = {
    "resp_allocate_ok.bin": (wire.Response.ok(URI_R, URI_W, URI_M), False),
    "resp_write_ok.bin": (wire.Response.ok(3), False),
    "resp_read_ok.bin": (wire.Response.ok(4, body=b"\x00" * 4), True),
    "resp_manage_ok.bin": (wire.Response.ok(1024, "60", "ACTIVE"), False),
    "resp_transfer_ok.bin": (wire.Response.ok(1024), False),
    "resp_transform_ok.bin": (wire.Response.ok(64), False),
}


@pytest.mark.parametrize("name", sorted(GOLDEN_REQUESTS))
def test_golden_request_bytes(name):
    expected = (GOLDEN / name).read_bytes()
    request = GOLDEN_REQUESTS[name]
    assert wire.encode_request(request) == expected
    assert wire.decode_request(io.BytesIO(expected)) == request


@pytest.mark.parametrize("name", sorted(GOLDEN_RESPONSES))
def test_golden_response_bytes(name):
    expected = (GOLDEN / name).read_bytes()
    response, body_expected = GOLDEN_RESPONSES[name]
    assert wire.encode_response(response) == expected
    decoded = wire.decode_response(io.BytesIO(expected), body_expected)
    assert decoded == response


@pytest.mark.parametrize("code", sorted(ALL_CODES))
def test_golden_error_responses_cover_every_code(code):
    data = (GOLDEN / f"resp_err_{code}.bin").read_bytes()
    decoded = wire.decode_response(io.BytesIO(data))
    assert decoded.status == "ERR"
    assert decoded.error_code == code
    assert wire.encode_response(decoded) == data


def test_oversize_header_rejected():
    blob = b"EBP/0.1 ALLOCATE " + b"9" * 5000 + b"\n"
    with pytest.raises(EbpError) as err:
        wire.decode_request(io.BytesIO(blob))
    assert err.value.code == E_PROTO


def test_unknown_protocol_tag_rejected():
    with pytest.raises(EbpError):
        wire.decode_request(io.BytesIO(b"EBP/0.2 ALLOCATE 1 1\n"))


def test_truncated_write_body_rejected():
    frame = f"EBP/0.1 WRITE {A11} {K22} 0 10\nabc".encode()
    with pytest.raises(EbpError) as err:
        wire.decode_request(io.BytesIO(frame))
    assert err.value.code == E_PROTO


@pytest.mark.parametrize("header", [
    "EBP/0.1 ALLOCATE 1024",                 # missing arg
    "EBP/0.1 ALLOCATE 1024 60 9",            # extra arg
    "EBP/0.1 ALLOCATE ten 60",               # non-integer
    "EBP/0.1 ALLOCATE -1 60",                # signed
    "EBP/0.1 ALLOCATE 007 60",               # non-canonical integer
    "EBP/0.1 SNOOP 1 2",                     # unknown verb
    f"EBP/0.1 MANAGE {A11} {K22} PROBE 12",  # probe takes no duration
    f"EBP/0.1 MANAGE {A11} {K22} EXTEND",    # extend needs duration
    f"EBP/0.1 WRITE {A11} short 0 0",        # bad key token
    f"EBP/0.1 TRANSFER {A11} {K22} notauri 0 0 1",
    "EBP/0.1  ALLOCATE 1 1",                 # double space
    "EBP/0.1 ALLOCATE 1 1 ",                 # trailing space
])
def test_bad_headers_rejected(header):
    with pytest.raises(EbpError) as err:
        wire.decode_request(io.BytesIO(header.encode() + b"\n"))
    assert err.value.code == E_PROTO


def test_clean_eof_yields_none():
    assert wire.decode_request(io.BytesIO(b"")) is None
    assert wire.decode_response(io.BytesIO(b"")) is None


def test_decode_consumes_exactly_one_frame():
    stream = io.BytesIO((GOLDEN / "req_write.bin").read_bytes()
                        + (GOLDEN / "req_read.bin").read_bytes())
    first = wire.decode_request(stream)
    second = wire.decode_request(stream)
    assert first.verb == "WRITE" and second.verb == "READ"
    assert wire.decode_request(stream) is None


class _Chunked(io.RawIOBase):
    """Stream returning at most ``chunk`` bytes per read call."""

    def __init__(self, data, chunk):
        self._inner = io.BytesIO(data)
        self._chunk = chunk

    def readable(self):
        return True

    def readinto(self, b):
        data = self._inner.read(min(len(b), self._chunk))
        b[:len(data)] = data
        return len(data)


@pytest.mark.parametrize("chunk", [1, 2, 3, 7, 4096])
def test_chunking_does_not_change_decoding(chunk):
    blob = b"".join((GOLDEN / n).read_bytes() for n in sorted(GOLDEN_REQUESTS))
    stream = io.BufferedReader(_Chunked(blob, chunk), buffer_size=1)
    decoded = []
    while True:
        request = wire.decode_request(stream)
        if request is None:
            break
        decoded.append(request)
    assert decoded == [GOLDEN_REQUESTS[n] for n in sorted(GOLDEN_REQUESTS)]


UINT = st.integers(min_value=0, max_value=2**40).map(str)
KEYTOK = st.binary(min_size=16, max_size=16).map(encode_key)


@settings(max_examples=200)
@given(size=UINT, duration=UINT)
def test_allocate_request_round_trip(size, duration):
    request = wire.Request("ALLOCATE", (size, duration))
    assert wire.decode_request(io.BytesIO(wire.encode_request(request))) == request


@settings(max_examples=200)
@given(body=st.binary(max_size=512), offset=UINT, key=KEYTOK)
def test_write_request_round_trip(body, offset, key):
    request = wire.Request("WRITE", (A11, key, offset, str(len(body))), body)
    assert wire.decode_request(io.BytesIO(wire.encode_request(request))) == request


@settings(max_examples=200)
@given(tokens=st.lists(st.from_regex(r"[\x21-\x7e]{1,12}", fullmatch=True),
                       max_size=5))
def test_ok_response_round_trip(tokens):
    response = wire.Response.ok(*tokens)
    assert wire.decode_response(io.BytesIO(wire.encode_response(response))) == response


@settings(max_examples=200)
@given(code=st.sampled_from(sorted(ALL_CODES)),
       message=st.from_regex(r"[\x20-\x7e]{1,60}", fullmatch=True).filter(
           lambda m: m.strip() and "  " not in m and m == m.strip()))
def test_err_response_round_trip(code, message):
    response = wire.Response.err(code, message)
    decoded = wire.decode_response(io.BytesIO(wire.encode_response(response)))
    assert decoded == response


@settings(max_examples=500)
@given(st.binary(max_size=200))
def test_fuzz_decode_never_crashes(data):
    try:
        wire.decode_request(io.BytesIO(data))
    except EbpError as exc:
        assert exc.code == E_PROTO
    try:
        wire.decode_response(io.BytesIO(data), body_expected=bool(data and data[0] & 1))
    except EbpError as exc:
        assert exc.code == E_PROTO


def test_mutated_golden_frames_never_crash():
    rng = random.Random(7)
    frames = [(GOLDEN / n).read_bytes() for n in sorted(GOLDEN_REQUESTS)]
    for _ in range(2000):
        frame = bytearray(rng.choice(frames))
        for _ in range(rng.randint(1, 4)):
            pos = rng.randrange(len(frame))
            frame[pos] ^= 1 << rng.randrange(8)
        try:
            wire.decode_request(io.BytesIO(bytes(frame)))
        except EbpError as exc:
            assert exc.code == E_PROTO
