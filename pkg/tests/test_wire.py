import pytest
from hypothesis import given, settings, strategies as st

from authlsm import wire
from authlsm.merkle import (
    build_level_tree,
    future_only_proof,
    membership_proof,
    non_membership_proof,
    range_proof,
)
from authlsm.record import Record

from helpers import WORKED_L2, WORKED_L3

keys = st.binary(min_size=1, max_size=3)
versions = st.lists(st.tuples(keys, st.integers(0, 50)), max_size=40, unique=True)


def _tree(pairs, level=1):
    records = sorted((Record(k, b"v%d" % ts, ts) for k, ts in pairs), key=lambda r: r.sort_key)
    return build_level_tree(level, records)


@given(versions)
@settings(max_examples=150, deadline=None)
def test_embedded_proofs_match_per_record_encoding(pairs):
    tree = _tree(pairs)
    expected = [
        wire.encode_embedded(tree.membership_at(i, p))
        for i, leaf in enumerate(tree.leaves)
        for p in range(len(leaf.chain))
    ]
    assert wire.embedded_proofs(tree) == expected


def test_embedded_proof_of_newest_z_carries_older_link():
    tree = build_level_tree(2, WORKED_L2)
    proofs = wire.embedded_proofs(tree)
    tail, path = wire.decode_embedded(proofs[1])  # <Z,7>
    assert tail == tree.leaves[1].links[1]
    assert [n.digest for n in path] == [tree.leaves[0].digest]
    tail, _ = wire.decode_embedded(proofs[2])  # <Z,6>: oldest, no tail
    assert tail is None


@given(versions, keys)
@settings(max_examples=150, deadline=None)
def test_every_proof_kind_round_trips(pairs, probe):
    tree = _tree(pairs, level=3)
    if tree.find(probe) is None:
        nm = non_membership_proof(tree, probe)
        assert wire.decode_non_membership(wire.encode_non_membership(nm)) == nm
        assert wire.decode_entry(wire.encode_entry(nm)) == nm
    else:
        r, mp = membership_proof(tree, probe)
        assert wire.decode_membership(wire.encode_membership(mp)) == mp
        assert wire.decode_entry(wire.encode_entry((r, mp))) == (r, mp)
        oldest = tree.leaves[tree.find(probe)].chain[-1]
        if oldest.ts > 0:
            fp = future_only_proof(tree, probe, oldest.ts - 1)
            assert wire.decode_entry(wire.encode_entry((None, fp))) == (None, fp)
    rp = range_proof(tree, probe, probe + b"\xff")
    assert wire.decode_range(wire.encode_range(rp)) == rp


@pytest.mark.parametrize("cut", [1, 5, 17, -1])
def test_truncated_encodings_are_rejected(cut):
    tree = build_level_tree(3, WORKED_L3)
    buf = wire.encode_non_membership(non_membership_proof(tree, b"B"))
    with pytest.raises(wire.WireError):
        wire.decode_non_membership(buf[:cut])


def test_trailing_bytes_are_rejected():
    tree = build_level_tree(3, WORKED_L3)
    _, mp = membership_proof(tree, b"Y")
    with pytest.raises(wire.WireError):
        wire.decode_membership(wire.encode_membership(mp) + b"\x00")


def test_bad_node_tag_is_rejected():
    tree = build_level_tree(3, WORKED_L3)
    buf = bytearray(wire.encode_nodes(tree.path(0)))
    buf[2] = 9
    with pytest.raises(wire.WireError):
        wire.decode_nodes(bytes(buf))
