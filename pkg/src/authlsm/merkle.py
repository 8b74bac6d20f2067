"""Per-level Merkle trees whose leaves are hash chains over same-key version groups.

A level's sorted run is grouped by key. Each group (newest version first) is
folded into a chain digest so that the newest version's encoding is the
outermost preimage; the group digests then form the leaves of a binary Merkle
tree whose unpaired nodes are promoted unchanged.

Adjacency and boundary claims are checked against the left/right shape of the
authentication paths, which the root commits to. When the verifier also knows
the level's leaf count (the trusted core always does), leaf indexes are pinned
exactly by requiring each path's shape to match the index.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Iterable, Sequence

from .record import (
    MAX_TS,
    TAG_EMPTY,
    TAG_LEAF,
    TAG_LINK,
    TAG_NODE,
    H,
    Record,
    encode_record,
)

EMPTY_ROOT = H(TAG_EMPTY)


class TreeError(ValueError):
    pass


class EmptyChain(TreeError):
    pass


class UnsortedChain(TreeError):
    pass


class MixedKeys(TreeError):
    pass


class UnsortedInput(TreeError):
    pass


class KeyAbsent(TreeError):
    pass


class KeyPresent(TreeError):
    pass


class Reason(str, Enum):
    ROOT_MISMATCH = "RootMismatch"
    WRONG_KEY = "WrongKey"
    FUTURE_RECORD = "FutureRecord"
    STALE_RESULT = "StaleResult"
    MALFORMED = "MalformedProof"
    NOT_ADJACENT = "NotAdjacent"
    NOT_BRACKETING = "NotBracketing"
    GAP_IN_LEAVES = "GapInLeaves"
    BOUNDARY_UNCOVERED = "BoundaryUncovered"
    MISSING_LEVEL = "MissingLevel"


class ProofError(Exception):
    """A proof was rejected."""

    def __init__(self, reason: Reason, detail: str = ""):
        super().__init__(f"{reason.value}: {detail}" if detail else reason.value)
        self.reason = reason
        self.detail = detail


class NodeKind(IntEnum):
    HASH = 0
    RECORD = 1
    LINK = 2


class Side(IntEnum):
    LEFT = 0
    RIGHT = 1
    CHAIN = 2


@dataclass(frozen=True, slots=True)
class ProofNode:
    kind: NodeKind
    side: Side
    digest: bytes | None = None
    record: Record | None = None


def _hash_node(side: Side, sibling: bytes, node: bytes) -> bytes:
    if side is Side.LEFT:
        return H(TAG_NODE, sibling, node)
    return H(TAG_NODE, node, sibling)


# ---------------------------------------------------------------- chains


def _check_chain(chain: Sequence[Record]) -> None:
    if not chain:
        raise EmptyChain("chain has no records")
    key = chain[0].key
    for prev, cur in zip(chain, chain[1:]):
        if cur.key != key:
            raise MixedKeys(f"chain mixes keys {key!r} and {cur.key!r}")
        if cur.ts >= prev.ts:
            raise UnsortedChain(f"timestamps not strictly descending: {prev.ts} then {cur.ts}")


def chain_links(chain: Sequence[Record]) -> list[bytes]:
    """All suffix digests of a newest-first chain; element j digests ``chain[j:]``."""
    _check_chain(chain)
    out = [b""] * len(chain)
    c = H(TAG_LEAF, encode_record(chain[-1]))
    out[-1] = c
    for j in range(len(chain) - 2, -1, -1):
        c = H(TAG_LINK, encode_record(chain[j]), c)
        out[j] = c
    return out


def chain_digest(chain: Sequence[Record]) -> bytes:
    return chain_links(chain)[0]


def open_leaf(records: Sequence[Record], tail: bytes | None) -> bytes:
    """Leaf digest from a plaintext newest-first prefix plus the digest of the older remainder.

    Raises ProofError(MALFORMED) instead of the chain errors: callers are verifiers.
    """
    try:
        if tail is None:
            return chain_digest(records)
        _check_chain(records)
    except TreeError as exc:
        raise ProofError(Reason.MALFORMED, str(exc)) from None
    if len(tail) != 32:
        raise ProofError(Reason.MALFORMED, "chain tail digest has wrong size")
    c = tail
    for r in reversed(records):
        c = H(TAG_LINK, encode_record(r), c)
    return c


# ---------------------------------------------------------------- trees


@dataclass(frozen=True, slots=True)
class Leaf:
    key: bytes
    chain: tuple[Record, ...]
    links: tuple[bytes, ...]

    @property
    def digest(self) -> bytes:
        return self.links[0]


def _next_layer(layer: list[bytes]) -> list[bytes]:
    out = [H(TAG_NODE, layer[i], layer[i + 1]) for i in range(0, len(layer) - 1, 2)]
    if len(layer) % 2:
        out.append(layer[-1])
    return out


class LevelTree:
    """Immutable Merkle tree over one level's sorted run."""

    def __init__(self, level: int, leaves: Sequence[Leaf]):
        self.level = level
        self.leaves: tuple[Leaf, ...] = tuple(leaves)
        self.keys = [leaf.key for leaf in self.leaves]
        layers = [[leaf.digest for leaf in self.leaves]]
        while len(layers[-1]) > 1:
            layers.append(_next_layer(layers[-1]))
        self.layers = layers
        self.root = layers[-1][0] if self.leaves else EMPTY_ROOT

    def __len__(self) -> int:
        return len(self.leaves)

    @property
    def record_count(self) -> int:
        return sum(len(leaf.chain) for leaf in self.leaves)

    def records(self) -> Iterable[Record]:
        for leaf in self.leaves:
            yield from leaf.chain

    def find(self, key: bytes) -> int | None:
        i = bisect.bisect_left(self.keys, key)
        if i < len(self.keys) and self.keys[i] == key:
            return i
        return None

    def path(self, index: int) -> tuple[ProofNode, ...]:
        nodes = []
        for layer in self.layers[:-1]:
            sib = index ^ 1
            if sib < len(layer):
                side = Side.LEFT if sib < index else Side.RIGHT
                nodes.append(ProofNode(NodeKind.HASH, side, digest=layer[sib]))
            index //= 2
        return tuple(nodes)

    def membership_at(self, index: int, position: int) -> MembershipProof:
        leaf = self.leaves[index]
        suffix = leaf.links[position + 1] if position + 1 < len(leaf.chain) else None
        return MembershipProof(
            level=self.level,
            leaf_index=index,
            chain_position=position,
            chain_prefix_records=leaf.chain[:position],
            chain_suffix_digest=suffix,
            path=self.path(index),
        )

    def neighbor(self, index: int) -> Neighbor:
        leaf = self.leaves[index]
        tail = leaf.links[1] if len(leaf.chain) > 1 else None
        return Neighbor(leaf.chain[:1], tail, index, self.path(index))


class LevelTreeBuilder:
    """Incremental tree construction over a record stream in record order."""

    def __init__(self, level: int):
        self.level = level
        self._leaves: list[Leaf] = []
        self._group: list[Record] = []
        self._prev: Record | None = None

    def add(self, r: Record) -> None:
        prev = self._prev
        if prev is not None and not prev.sort_key < r.sort_key:
            raise UnsortedInput(f"{r} does not follow {prev} in record order")
        if self._group and self._group[0].key != r.key:
            self._close_group()
        self._group.append(r)
        self._prev = r

    def _close_group(self) -> None:
        chain = tuple(self._group)
        self._leaves.append(Leaf(chain[0].key, chain, tuple(chain_links(chain))))
        self._group = []

    def finish(self) -> LevelTree:
        if self._group:
            self._close_group()
        return LevelTree(self.level, self._leaves)


def build_level_tree(level: int, records: Iterable[Record]) -> LevelTree:
    b = LevelTreeBuilder(level)
    for r in records:
        b.add(r)
    return b.finish()


# ---------------------------------------------------------------- proofs


@dataclass(frozen=True, slots=True)
class MembershipProof:
    level: int
    leaf_index: int
    chain_position: int
    chain_prefix_records: tuple[Record, ...]
    chain_suffix_digest: bytes | None
    path: tuple[ProofNode, ...]

    @property
    def hash_count(self) -> int:
        return len(self.path) + (self.chain_suffix_digest is not None)


@dataclass(frozen=True, slots=True)
class Neighbor:
    records: tuple[Record, ...]
    tail: bytes | None
    leaf_index: int
    path: tuple[ProofNode, ...]

    @property
    def key(self) -> bytes:
        return self.records[0].key


@dataclass(frozen=True, slots=True)
class NonMembershipProof:
    level: int
    left: Neighbor | None
    right: Neighbor | None
    empty_level: bool = False

    @property
    def hash_count(self) -> int:
        return sum(len(n.path) + (n.tail is not None) for n in (self.left, self.right) if n)


@dataclass(frozen=True, slots=True)
class LeafOpening:
    records: tuple[Record, ...]
    tail: bytes | None = None

    @property
    def key(self) -> bytes:
        return self.records[0].key


@dataclass(frozen=True, slots=True)
class RangeProof:
    level: int
    leaf_count: int
    first_index: int
    leaves: tuple[LeafOpening, ...]
    left_boundary: bool
    right_boundary: bool
    siblings: tuple[tuple[int, int, bytes], ...]  # (layer, index, digest)

    @property
    def hash_count(self) -> int:
        return len(self.siblings) + sum(o.tail is not None for o in self.leaves)


def membership_proof(tree: LevelTree, key: bytes, ts_q: int = MAX_TS) -> tuple[Record, MembershipProof]:
    i = tree.find(key)
    if i is None:
        raise KeyAbsent(f"{key!r} not in level {tree.level}")
    for p, r in enumerate(tree.leaves[i].chain):
        if r.ts <= ts_q:
            return r, tree.membership_at(i, p)
    raise KeyAbsent(f"no version of {key!r} at or before ts {ts_q} in level {tree.level}")


def future_only_proof(tree: LevelTree, key: bytes, ts_q: int) -> MembershipProof:
    """Open a whole chain whose every version is newer than ``ts_q``."""
    i = tree.find(key)
    if i is None:
        raise KeyAbsent(f"{key!r} not in level {tree.level}")
    leaf = tree.leaves[i]
    if leaf.chain[-1].ts <= ts_q:
        raise KeyPresent(f"{key!r} has a version visible at ts {ts_q}")
    return MembershipProof(tree.level, i, len(leaf.chain), leaf.chain, None, tree.path(i))


def non_membership_proof(tree: LevelTree, key: bytes) -> NonMembershipProof:
    if not tree.leaves:
        return NonMembershipProof(tree.level, None, None, empty_level=True)
    i = bisect.bisect_left(tree.keys, key)
    if i < len(tree.keys) and tree.keys[i] == key:
        raise KeyPresent(f"{key!r} is in level {tree.level}")
    left = tree.neighbor(i - 1) if i > 0 else None
    right = tree.neighbor(i) if i < len(tree.leaves) else None
    return NonMembershipProof(tree.level, left, right)


def range_proof(tree: LevelTree, k1: bytes, k2: bytes) -> RangeProof:
    if k1 > k2:
        raise ValueError("empty key range: k1 > k2")
    n = len(tree.leaves)
    if n == 0:
        return RangeProof(tree.level, 0, 0, (), False, False, ())
    lo = bisect.bisect_left(tree.keys, k1)
    hi = bisect.bisect_right(tree.keys, k2) - 1
    left_b = lo > 0
    right_b = hi + 1 < n
    a = lo - 1 if left_b else lo
    b = hi + 1 if right_b else hi
    openings = []
    for j in range(a, b + 1):
        leaf = tree.leaves[j]
        boundary = (left_b and j == a) or (right_b and j == b)
        if boundary and len(leaf.chain) > 1:
            openings.append(LeafOpening(leaf.chain[:1], leaf.links[1]))
        elif boundary:
            openings.append(LeafOpening(leaf.chain[:1]))
        else:
            openings.append(LeafOpening(leaf.chain))
    siblings = []
    layer_no = 0
    for layer in tree.layers[:-1]:
        if a % 2 == 1:
            siblings.append((layer_no, a - 1, layer[a - 1]))
            a -= 1
        if b % 2 == 0 and b + 1 < len(layer):
            siblings.append((layer_no, b + 1, layer[b + 1]))
            b += 1
        a //= 2
        b //= 2
        layer_no += 1
    return RangeProof(tree.level, n, lo - 1 if left_b else lo, tuple(openings), left_b, right_b, tuple(siblings))


# ---------------------------------------------------------------- verification


def _fold_path(leaf_digest: bytes, path: Sequence[ProofNode]) -> bytes:
    node = leaf_digest
    for pn in path:
        if pn.kind is not NodeKind.HASH or pn.side is Side.CHAIN or pn.digest is None or len(pn.digest) != 32:
            raise ProofError(Reason.MALFORMED, "path nodes must be left/right digests")
        node = _hash_node(pn.side, pn.digest, node)
    return node


def path_sides(index: int, leaf_count: int) -> list[Side]:
    """Sibling sides, leaf to root, of the path to ``index`` in a tree of ``leaf_count`` leaves."""
    sides = []
    size = leaf_count
    while size > 1:
        sib = index ^ 1
        if sib < size:
            sides.append(Side.LEFT if sib < index else Side.RIGHT)
        index //= 2
        size = (size + 1) // 2
    return sides


def _check_position(path: Sequence[ProofNode], index: int, leaf_count: int | None) -> None:
    if leaf_count is None:
        return
    if not 0 <= index < leaf_count or [pn.side for pn in path] != path_sides(index, leaf_count):
        raise ProofError(Reason.MALFORMED, f"path does not lead to leaf {index} of {leaf_count}")


def _check_level(proof, level: int | None) -> None:
    if level is not None and proof.level != level:
        raise ProofError(Reason.MALFORMED, f"proof is for level {proof.level}, expected {level}")


def _directions(path: Sequence[ProofNode]) -> list[str]:
    """Root-to-leaf turns taken by a path: 'L' when the node is a left child."""
    return ["L" if pn.side is Side.RIGHT else "R" for pn in reversed(path)]


def _adjacent(left: Sequence[ProofNode], right: Sequence[ProofNode]) -> bool:
    dl, dr = _directions(left), _directions(right)
    d = 0
    while d < len(dl) and d < len(dr) and dl[d] == dr[d]:
        d += 1
    if d == len(dl) or d == len(dr) or dl[d] != "L":
        return False
    return all(x == "R" for x in dl[d + 1 :]) and all(x == "L" for x in dr[d + 1 :])


def _check_records(records: Sequence[Record]) -> None:
    if not records or not all(isinstance(r, Record) for r in records):
        raise ProofError(Reason.MALFORMED, "missing plaintext records")


def verify_membership(
    root: bytes,
    key: bytes,
    ts_q: int,
    result: Record,
    proof: MembershipProof,
    *,
    level: int | None = None,
    leaf_count: int | None = None,
) -> None:
    """Accept (return) iff ``result`` is the freshest version of ``key`` at ts_q in the level; else raise ProofError.

    ``level`` and ``leaf_count``, when the caller knows them from trusted state,
    additionally pin the proof's level id and leaf index.
    """
    if not isinstance(result, Record):
        raise ProofError(Reason.MALFORMED, "missing result record")
    _check_level(proof, level)
    prefix = tuple(proof.chain_prefix_records)
    if prefix:
        _check_records(prefix)
    if proof.chain_position != len(prefix):
        raise ProofError(Reason.MALFORMED, "chain position disagrees with opened links")
    _check_position(proof.path, proof.leaf_index, leaf_count)
    leaf = open_leaf(prefix + (result,), proof.chain_suffix_digest)
    if _fold_path(leaf, proof.path) != root:
        raise ProofError(Reason.ROOT_MISMATCH, f"level {proof.level}")
    if result.key != key:
        raise ProofError(Reason.WRONG_KEY, f"asked {key!r}, got {result.key!r}")
    if result.ts > ts_q:
        raise ProofError(Reason.FUTURE_RECORD, f"result ts {result.ts} > query ts {ts_q}")
    for r in prefix:
        if r.ts <= ts_q:
            raise ProofError(Reason.STALE_RESULT, f"{r} is fresher than {result}")


def verify_future_only(
    root: bytes,
    key: bytes,
    ts_q: int,
    proof: MembershipProof,
    *,
    level: int | None = None,
    leaf_count: int | None = None,
) -> None:
    """Accept iff the proof opens the whole chain of ``key`` and every version is newer than ts_q."""
    _check_level(proof, level)
    prefix = tuple(proof.chain_prefix_records)
    _check_records(prefix)
    if proof.chain_position != len(prefix):
        raise ProofError(Reason.MALFORMED, "chain position disagrees with opened links")
    _check_position(proof.path, proof.leaf_index, leaf_count)
    if proof.chain_suffix_digest is not None:
        raise ProofError(Reason.MALFORMED, "future-only proof must open the whole chain")
    if _fold_path(open_leaf(prefix, None), proof.path) != root:
        raise ProofError(Reason.ROOT_MISMATCH, f"level {proof.level}")
    if prefix[0].key != key:
        raise ProofError(Reason.WRONG_KEY, f"asked {key!r}, got {prefix[0].key!r}")
    if prefix[-1].ts <= ts_q:
        raise ProofError(Reason.STALE_RESULT, f"{prefix[-1]} is visible at ts {ts_q}")


def _verify_neighbor(root: bytes, nb: Neighbor) -> None:
    _check_records(nb.records)
    if _fold_path(open_leaf(nb.records, nb.tail), nb.path) != root:
        raise ProofError(Reason.ROOT_MISMATCH, f"neighbor {nb.records[0]}")


def verify_non_membership(
    root: bytes,
    key: bytes,
    proof: NonMembershipProof,
    *,
    level: int | None = None,
    leaf_count: int | None = None,
) -> None:
    _check_level(proof, level)
    left, right = proof.left, proof.right
    if proof.empty_level:
        if left is not None or right is not None:
            raise ProofError(Reason.MALFORMED, "empty-level proof carries neighbors")
        if root != EMPTY_ROOT:
            raise ProofError(Reason.ROOT_MISMATCH, "level is not empty")
        return
    if left is None and right is None:
        raise ProofError(Reason.MALFORMED, "no neighbors")
    for nb in (left, right):
        if nb is not None:
            _check_position(nb.path, nb.leaf_index, leaf_count)
            _verify_neighbor(root, nb)
    if left is not None and not left.key < key:
        raise ProofError(Reason.NOT_BRACKETING, f"left neighbor {left.key!r} !< {key!r}")
    if right is not None and not key < right.key:
        raise ProofError(Reason.NOT_BRACKETING, f"right neighbor {right.key!r} !> {key!r}")
    if left is not None and right is not None:
        if right.leaf_index != left.leaf_index + 1 or not _adjacent(left.path, right.path):
            raise ProofError(Reason.NOT_ADJACENT, "neighbors are not consecutive leaves")
    elif left is not None:
        if any(d != "R" for d in _directions(left.path)):
            raise ProofError(Reason.NOT_ADJACENT, "left neighbor is not the last leaf")
    elif right is not None:
        if any(d != "L" for d in _directions(right.path)):
            raise ProofError(Reason.NOT_ADJACENT, "right neighbor is not the first leaf")


def _range_root(proof: RangeProof, digests: list[bytes]) -> bytes:
    n, a = proof.leaf_count, proof.first_index
    b = a + len(digests) - 1
    if a < 0 or b >= n:
        raise ProofError(Reason.MALFORMED, "opened leaves fall outside the claimed tree")
    sib = {}
    for layer, idx, d in proof.siblings:
        if len(d) != 32 or (layer, idx) in sib:
            raise ProofError(Reason.MALFORMED, "bad sibling entry")
        sib[(layer, idx)] = d
    cur = list(digests)
    size, layer = n, 0
    while size > 1:
        if a % 2 == 1:
            cur.insert(0, _take(sib, layer, a - 1))
            a -= 1
        if b % 2 == 0 and b + 1 < size:
            cur.append(_take(sib, layer, b + 1))
            b += 1
        nxt = [H(TAG_NODE, cur[i], cur[i + 1]) for i in range(0, len(cur) - 1, 2)]
        if len(cur) % 2:
            nxt.append(cur[-1])
        cur = nxt
        a //= 2
        b //= 2
        size = (size + 1) // 2
        layer += 1
    if sib:
        raise ProofError(Reason.MALFORMED, f"{len(sib)} unused sibling digests")
    return cur[0]


def _take(sib: dict, layer: int, idx: int) -> bytes:
    try:
        return sib.pop((layer, idx))
    except KeyError:
        raise ProofError(Reason.MALFORMED, f"missing sibling at layer {layer} index {idx}") from None


def verify_range(
    root: bytes,
    k1: bytes,
    k2: bytes,
    proof: RangeProof,
    *,
    level: int | None = None,
    leaf_count: int | None = None,
) -> list[Record]:
    """Return every version of every key in [k1, k2] held by the level, or raise ProofError."""
    _check_level(proof, level)
    if leaf_count is not None and proof.leaf_count != leaf_count:
        raise ProofError(Reason.MALFORMED, f"proof claims {proof.leaf_count} leaves, level has {leaf_count}")
    ops = proof.leaves
    if proof.leaf_count == 0:
        if ops or proof.siblings or proof.first_index or proof.left_boundary or proof.right_boundary:
            raise ProofError(Reason.MALFORMED, "empty-level range proof carries data")
        if root != EMPTY_ROOT:
            raise ProofError(Reason.ROOT_MISMATCH, "level is not empty")
        return []
    if not ops or len(ops) < proof.left_boundary + proof.right_boundary:
        raise ProofError(Reason.MALFORMED, "too few opened leaves")
    for o in ops:
        _check_records(o.records)
    digests = [open_leaf(o.records, o.tail) for o in ops]
    if _range_root(proof, digests) != root:
        raise ProofError(Reason.ROOT_MISMATCH, f"level {proof.level}")
    for x, y in zip(ops, ops[1:]):
        if not x.key < y.key:
            raise ProofError(Reason.GAP_IN_LEAVES, "opened leaves are not in key order")
    if proof.left_boundary:
        if not ops[0].key < k1:
            raise ProofError(Reason.BOUNDARY_UNCOVERED, "left boundary inside range")
    elif proof.first_index != 0:
        raise ProofError(Reason.BOUNDARY_UNCOVERED, "no left boundary but first leaf is not leaf 0")
    if proof.right_boundary:
        if not ops[-1].key > k2:
            raise ProofError(Reason.BOUNDARY_UNCOVERED, "right boundary inside range")
    elif proof.first_index + len(ops) != proof.leaf_count:
        raise ProofError(Reason.BOUNDARY_UNCOVERED, "no right boundary but last leaf is not the final leaf")
    interior = ops[proof.left_boundary : len(ops) - proof.right_boundary]
    out: list[Record] = []
    for o in interior:
        if not k1 <= o.key <= k2:
            raise ProofError(Reason.BOUNDARY_UNCOVERED, f"leaf {o.key!r} outside [{k1!r}, {k2!r}]")
        if o.tail is not None:
            raise ProofError(Reason.MALFORMED, "in-range leaf chain not fully opened")
        out.extend(o.records)
    return out
