import secrets
import statistics
import time

import pytest
from hypothesis import given, settings, strategies as st

from ebp import capability
from ebp.capability import Capability, KINDS, mint, parse, verify
from ebp.errors import E_PROTO, EbpError

NODE_IDS = st.from_regex(r"[a-z0-9-]{1,16}", fullmatch=True)
ALLOC_IDS = st.from_regex(r"[A-Za-z0-9_-]{1,24}", fullmatch=True)
HOSTS = st.from_regex(r"[a-z0-9.-]{1,20}", fullmatch=True).filter(
    lambda h: ":" not in h and "/" not in h and h.strip())
CAPS = st.builds(
    Capability,
    node_id=NODE_IDS,
    endpoint=st.builds(lambda h, p: f"{h}:{p}", HOSTS,
                       st.integers(min_value=1, max_value=65535)),
    alloc_id=ALLOC_IDS,
    key=st.binary(min_size=16, max_size=16),
    kind=st.sampled_from(KINDS),
)


def test_mint_returns_distinct_keys():
    a = mint("d0", "127.0.0.1:6714", "alloc", "read")
    b = mint("d0", "127.0.0.1:6714", "alloc", "read")
    assert a.key != b.key


def test_minted_capability_verifies_against_stored_key():
    cap = mint("d0", "127.0.0.1:6714", "alloc", "write")
    assert verify(cap.key, cap.key)


def test_ten_thousand_mints_are_distinct():
    keys = {mint("d0", "h:1", "a", "read").key for _ in range(10_000)}
    assert len(keys) == 10_000


def test_zero_key_uri_renders_twentytwo_a_characters():
    cap = Capability("d1", "127.0.0.1:6714", "AAAAAAAA", bytes(16), "read")
    assert cap.to_uri() == (
        "ebp://127.0.0.1:6714/d1/AAAAAAAA/AAAAAAAAAAAAAAAAAAAAAA/read")


@settings(max_examples=300)
@given(CAPS)
def test_uri_round_trip(cap):
    assert parse(cap.to_uri()) == cap


@pytest.mark.parametrize("uri", [
    "ebp://h:1/n/a/short/read",
    "ebp://h:1/n/a/AAAAAAAAAAAAAAAAAAAAAA/peek",
    "http://h:1/n/a/AAAAAAAAAAAAAAAAAAAAAA/read",
    "ebp://h/n/a/AAAAAAAAAAAAAAAAAAAAAA/read",
    "ebp://h:0/n/a/AAAAAAAAAAAAAAAAAAAAAA/read",
    "ebp://h:1/UPPER/a/AAAAAAAAAAAAAAAAAAAAAA/read",
    "ebp://h:1/n/a/AAAAAAAAAAAAAAAAAAAAAA/read/extra",
    "",
])
def test_parse_rejects_malformed_uris(uri):
    with pytest.raises(EbpError) as err:
        parse(uri)
    assert err.value.code == E_PROTO


def test_parse_rejects_noncanonical_key_encoding():
    # 22 chars whose trailing bits are nonzero decode to 16 bytes but would
    # re-encode differently
    uri = "ebp://h:1/n/a/" + "A" * 21 + "B" + "/read"
    with pytest.raises(EbpError):
        parse(uri)


def test_verify_equal_and_unequal():
    key = secrets.token_bytes(16)
    other = key[:-1] + bytes([key[-1] ^ 1])
    assert verify(key, key)
    assert not verify(key, other)


def test_mint_rejects_unknown_kind():
    with pytest.raises(EbpError):
        mint("d0", "h:1", "a", "peek")


def test_verify_timing_is_flat_informational():
    """Constant-time comparison: report, never gate (measurement noise)."""
    stored = bytes(16)
    first = bytes([1]) + bytes(15)
    last = bytes(15) + bytes([1])

    def sample(candidate):
        times = []
        for _ in range(2000):
            t0 = time.perf_counter_ns()
            verify(candidate, stored)
            times.append(time.perf_counter_ns() - t0)
        return statistics.median(times)

    early, late = sample(first), sample(last)
    print(f"verify timing (median ns): first-byte mismatch {early}, "
          f"last-byte mismatch {late}")


def test_encode_key_rejects_wrong_length():
    with pytest.raises(EbpError):
        capability.encode_key(b"short")
