"""Byte encodings for proofs.

A node list is ``count u16`` followed by nodes of the form
``tag u8 | side u8 | payload`` where the payload is a 32-byte digest for
HashOnly nodes and ``len u32 | encode_record`` for record-bearing nodes.
Side 2 marks chain-internal nodes (plaintext chain links, head records of
neighbor leaves, older-chain digests); sides 0/1 are Merkle path siblings.
"""

from __future__ import annotations

import struct
from typing import Sequence

from .merkle import (
    LeafOpening,
    MembershipProof,
    Neighbor,
    NodeKind,
    NonMembershipProof,
    ProofNode,
    RangeProof,
    Side,
)
from .record import Record, RecordError, decode_exact, encode_record

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class WireError(ValueError):
    pass


class _Reader:
    def __init__(self, buf: bytes, pos: int = 0):
        self.buf = buf
        self.pos = pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise WireError("truncated proof encoding")
        out = bytes(self.buf[self.pos : self.pos + n])
        self.pos += n
        return out

    def unpack(self, s: struct.Struct) -> int:
        return s.unpack(self.take(s.size))[0]

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise WireError(f"{len(self.buf) - self.pos} trailing bytes")


def encode_nodes(nodes: Sequence[ProofNode]) -> bytes:
    if len(nodes) > 0xFFFF:
        raise WireError("too many proof nodes for a u16 count")
    parts = [_U16.pack(len(nodes))]
    for n in nodes:
        parts.append(bytes((n.kind, n.side)))
        if n.kind is NodeKind.HASH:
            parts.append(n.digest)
        else:
            enc = encode_record(n.record)
            parts.append(_U32.pack(len(enc)))
            parts.append(enc)
    return b"".join(parts)


def _read_nodes(rd: _Reader) -> list[ProofNode]:
    count = rd.unpack(_U16)
    nodes = []
    for _ in range(count):
        tag, side = rd.take(2)
        try:
            kind, sd = NodeKind(tag), Side(side)
        except ValueError:
            raise WireError(f"bad node tag/side {tag}/{side}") from None
        if kind is NodeKind.HASH:
            nodes.append(ProofNode(kind, sd, digest=rd.take(32)))
        else:
            length = rd.unpack(_U32)
            try:
                rec = decode_exact(rd.take(length))
            except RecordError as exc:
                raise WireError(str(exc)) from None
            nodes.append(ProofNode(kind, sd, record=rec))
    return nodes


def decode_nodes(buf: bytes) -> list[ProofNode]:
    rd = _Reader(buf)
    nodes = _read_nodes(rd)
    rd.done()
    return nodes


def _split_chain(nodes: Sequence[ProofNode]) -> tuple[list[Record], bytes | None, tuple[ProofNode, ...]]:
    """Separate leading chain-side nodes (records, then an optional tail digest) from the path."""
    records: list[Record] = []
    tail = None
    i = 0
    while i < len(nodes) and nodes[i].side is Side.CHAIN:
        n = nodes[i]
        if n.kind is NodeKind.HASH:
            if tail is not None:
                raise WireError("two chain tail digests")
            tail = n.digest
        elif tail is not None:
            raise WireError("chain record after tail digest")
        else:
            records.append(n.record)
        i += 1
    return records, tail, tuple(nodes[i:])


def _chain_nodes(records: Sequence[Record], tail: bytes | None, kind: NodeKind) -> list[ProofNode]:
    out = [ProofNode(kind, Side.CHAIN, record=r) for r in records]
    if tail is not None:
        out.append(ProofNode(NodeKind.HASH, Side.CHAIN, digest=tail))
    return out


# ---------------------------------------------------------------- embedded proofs


def embedded_nodes(proof: MembershipProof) -> list[ProofNode]:
    """Node list stored next to a record in a run file.

    Newer chain links are omitted: they are the records immediately preceding
    this one in the same run.
    """
    return _chain_nodes((), proof.chain_suffix_digest, NodeKind.LINK) + list(proof.path)


def encode_embedded(proof: MembershipProof) -> bytes:
    return encode_nodes(embedded_nodes(proof))


def decode_embedded(buf: bytes) -> tuple[bytes | None, tuple[ProofNode, ...]]:
    records, tail, path = _split_chain(decode_nodes(buf))
    if records:
        raise WireError("embedded proofs carry no plaintext links")
    return tail, path


# ---------------------------------------------------------------- full proofs


def encode_membership(proof: MembershipProof) -> bytes:
    nodes = _chain_nodes(proof.chain_prefix_records, proof.chain_suffix_digest, NodeKind.LINK)
    return b"".join(
        (
            _U16.pack(proof.level),
            _U64.pack(proof.leaf_index),
            _U32.pack(proof.chain_position),
            encode_nodes(nodes + list(proof.path)),
        )
    )


def _read_membership(rd: _Reader) -> MembershipProof:
    level = rd.unpack(_U16)
    leaf_index = rd.unpack(_U64)
    position = rd.unpack(_U32)
    records, tail, path = _split_chain(_read_nodes(rd))
    return MembershipProof(level, leaf_index, position, tuple(records), tail, path)


def decode_membership(buf: bytes) -> MembershipProof:
    rd = _Reader(buf)
    p = _read_membership(rd)
    rd.done()
    return p


def _encode_neighbor(nb: Neighbor) -> bytes:
    nodes = _chain_nodes(nb.records, nb.tail, NodeKind.RECORD) + list(nb.path)
    return _U64.pack(nb.leaf_index) + encode_nodes(nodes)


def _read_neighbor(rd: _Reader) -> Neighbor:
    idx = rd.unpack(_U64)
    records, tail, path = _split_chain(_read_nodes(rd))
    return Neighbor(tuple(records), tail, idx, path)


def encode_non_membership(proof: NonMembershipProof) -> bytes:
    flags = (proof.left is not None) | (proof.right is not None) << 1 | proof.empty_level << 2
    parts = [_U16.pack(proof.level), _U8.pack(flags)]
    for nb in (proof.left, proof.right):
        if nb is not None:
            parts.append(_encode_neighbor(nb))
    return b"".join(parts)


def _read_non_membership(rd: _Reader) -> NonMembershipProof:
    level = rd.unpack(_U16)
    flags = rd.unpack(_U8)
    if flags & ~0x07:
        raise WireError(f"bad flags {flags:#x}")
    left = _read_neighbor(rd) if flags & 1 else None
    right = _read_neighbor(rd) if flags & 2 else None
    return NonMembershipProof(level, left, right, bool(flags & 4))


def decode_non_membership(buf: bytes) -> NonMembershipProof:
    rd = _Reader(buf)
    p = _read_non_membership(rd)
    rd.done()
    return p


def encode_range(proof: RangeProof) -> bytes:
    flags = proof.left_boundary | proof.right_boundary << 1
    parts = [
        _U16.pack(proof.level),
        _U64.pack(proof.leaf_count),
        _U64.pack(proof.first_index),
        _U8.pack(flags),
        _U32.pack(len(proof.leaves)),
    ]
    for o in proof.leaves:
        parts.append(encode_nodes(_chain_nodes(o.records, o.tail, NodeKind.RECORD)))
    parts.append(_U32.pack(len(proof.siblings)))
    for layer, idx, d in proof.siblings:
        parts.append(_U8.pack(layer) + _U64.pack(idx) + d)
    return b"".join(parts)


def decode_range(buf: bytes) -> RangeProof:
    rd = _Reader(buf)
    level = rd.unpack(_U16)
    count = rd.unpack(_U64)
    first = rd.unpack(_U64)
    flags = rd.unpack(_U8)
    if flags & ~0x03:
        raise WireError(f"bad flags {flags:#x}")
    leaves = []
    for _ in range(rd.unpack(_U32)):
        records, tail, rest = _split_chain(_read_nodes(rd))
        if rest:
            raise WireError("path nodes inside a range leaf")
        leaves.append(LeafOpening(tuple(records), tail))
    siblings = []
    for _ in range(rd.unpack(_U32)):
        layer = rd.unpack(_U8)
        idx = rd.unpack(_U64)
        siblings.append((layer, idx, rd.take(32)))
    rd.done()
    return RangeProof(level, count, first, tuple(leaves), bool(flags & 1), bool(flags & 2), tuple(siblings))


# ---------------------------------------------------------------- get responses

_ENTRY_NM, _ENTRY_HIT, _ENTRY_FUTURE = 0, 1, 2


def encode_entry(entry) -> bytes:
    """One per-level entry of a get response: a NonMembershipProof or (record | None, MembershipProof)."""
    if isinstance(entry, NonMembershipProof):
        return _U8.pack(_ENTRY_NM) + encode_non_membership(entry)
    record, proof = entry
    if record is None:
        return _U8.pack(_ENTRY_FUTURE) + encode_membership(proof)
    enc = encode_record(record)
    return _U8.pack(_ENTRY_HIT) + _U32.pack(len(enc)) + enc + encode_membership(proof)


def decode_entry(buf: bytes):
    rd = _Reader(buf)
    kind = rd.unpack(_U8)
    if kind == _ENTRY_NM:
        out = _read_non_membership(rd)
    elif kind == _ENTRY_FUTURE:
        out = (None, _read_membership(rd))
    elif kind == _ENTRY_HIT:
        try:
            rec = decode_exact(rd.take(rd.unpack(_U32)))
        except RecordError as exc:
            raise WireError(str(exc)) from None
        out = (rec, _read_membership(rd))
    else:
        raise WireError(f"bad entry kind {kind}")
    rd.done()
    return out


def embedded_proofs(tree) -> list[bytes]:
    """Serialized embedded proof for every record of ``tree``, in record order.

    Equivalent to ``encode_embedded(tree.membership_at(i, p))`` for each record,
    but shares the per-layer sibling encodings across leaves.
    """
    per_layer = []
    for layer in tree.layers[:-1]:
        size = len(layer)
        ent: list[bytes | None] = [None] * size
        for j in range(size):
            sib = j ^ 1
            if sib < size:
                ent[j] = bytes((NodeKind.HASH, Side.LEFT if sib < j else Side.RIGHT)) + layer[sib]
        per_layer.append(ent)
    chain_tag = bytes((NodeKind.HASH, Side.CHAIN))
    out = []
    for i, leaf in enumerate(tree.leaves):
        parts = []
        j = i
        for ent in per_layer:
            e = ent[j]
            if e is not None:
                parts.append(e)
            j >>= 1
        path = b"".join(parts)
        m = len(leaf.chain)
        for p in range(m - 1):
            out.append(_U16.pack(len(parts) + 1) + chain_tag + leaf.links[p + 1] + path)
        out.append(_U16.pack(len(parts)) + path)
    return out
