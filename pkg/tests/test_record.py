import pytest
from hypothesis import given, strategies as st

from authlsm.record import (
    Record,
    RecordError,
    decode_exact,
    decode_record,
    encode_record,
    record_order,
    tombstone,
)

from helpers import enc, rec

records = st.builds(
    Record,
    key=st.binary(min_size=1, max_size=40),
    value=st.binary(max_size=60),
    ts=st.integers(0, 2**64 - 1),
)
records_or_tombs = records | st.builds(tombstone, st.binary(min_size=1, max_size=40), st.integers(0, 2**64 - 1))


def test_encoding_layout():
    got = encode_record(Record(b"A", b"", 9))
    assert got == bytes.fromhex("01000000" "41" "0900000000000000" "00" "00000000")


def test_encoding_matches_independent_packer():
    r = Record(b"key", b"value", 123456789, False)
    assert encode_record(r) == enc(b"key", b"value", 123456789)
    assert encode_record(tombstone(b"k", 5)) == enc(b"k", b"", 5, True)


def test_ts_only_difference_is_in_ts_bytes():
    a = encode_record(Record(b"A", b"x", 9))
    b = encode_record(Record(b"A", b"x", 10))
    diff = [i for i in range(len(a)) if a[i] != b[i]]
    assert diff and all(5 <= i < 13 for i in diff)


@given(records_or_tombs)
def test_round_trip(r):
    assert decode_exact(encode_record(r)) == r


@given(records_or_tombs, records_or_tombs)
def test_encoding_injective(a, b):
    if a != b:
        assert encode_record(a) != encode_record(b)


def test_decode_rejects_truncation_and_trailing_bytes():
    buf = encode_record(Record(b"abc", b"defg", 3))
    for cut in range(len(buf)):
        with pytest.raises(RecordError):
            decode_exact(buf[:cut])
    with pytest.raises(RecordError):
        decode_exact(buf + b"\x00")
    r, end = decode_record(buf + b"junk")
    assert end == len(buf)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(key=b"", value=b"", ts=1),
        dict(key=b"k" * 65536, value=b"", ts=1),
        dict(key=b"k", value=b"", ts=-1),
        dict(key=b"k", value=b"", ts=2**64),
        dict(key=b"k", value=b"v", ts=1, tombstone=True),
    ],
)
def test_invalid_records(kwargs):
    with pytest.raises(RecordError):
        Record(**kwargs)


def test_order_examples():
    assert record_order(rec("T", 4), rec("Z", 7)) == -1
    assert record_order(rec("Z", 7), rec("Z", 6)) == -1
    r = rec("Z", 7)
    assert record_order(r, r) == 0


distinct_pairs = st.lists(
    st.tuples(st.binary(min_size=1, max_size=3), st.integers(0, 20)), min_size=3, max_size=3, unique=True
)


@given(distinct_pairs)
def test_order_is_total_antisymmetric_transitive(pairs):
    a, b, c = (Record(k, b"", t) for k, t in pairs)
    assert record_order(a, b) == -record_order(b, a) != 0
    if record_order(a, b) < 0 and record_order(b, c) < 0:
        assert record_order(a, c) < 0
