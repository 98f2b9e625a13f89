"""Sorted Merkle tree with membership and non-membership proofs.

Leaves are the distinct values in lexicographic order. Leaf and internal
nodes use different hash tags, and an unpaired node at the end of a level
is promoted unchanged. Promotion keeps every internal node binary, so the
direction bits of a path locate a leaf in the in-order leaf sequence:
two leaves are adjacent iff their root-to-leaf directions are ``P+L+R*``
and ``P+R+L*``. Non-membership proofs rely on that, with the minimum
(all-left) and maximum (all-right) leaves covering the boundaries.
"""

from __future__ import annotations

import bisect
import enum
from dataclasses import dataclass
from typing import Iterable, NamedTuple

from .encoding import DIGEST_SIZE, H, Reader, lp, u8

LEAF_TAG = b"\x00"
NODE_TAG = b"\x01"
EMPTY_ROOT = H(b"\x02", b"fedselect/merkle/empty")


def leaf_hash(value: bytes) -> bytes:
    return H(LEAF_TAG, H(value))


def node_hash(left: bytes, right: bytes) -> bytes:
    return H(NODE_TAG, left, right)


class Verdict(enum.Enum):
    MEMBER = "member"
    NON_MEMBER = "non_member"
    INVALID = "invalid"


class ProofKind(enum.IntEnum):
    MEMBERSHIP = 0
    NON_MEMBERSHIP = 1


class PathStep(NamedTuple):
    sibling: bytes
    sibling_left: bool


@dataclass(frozen=True)
class LeafPath:
    leaf: bytes
    steps: tuple[PathStep, ...]

    def root(self) -> bytes:
        node = leaf_hash(self.leaf)
        for sib, sib_left in self.steps:
            node = node_hash(sib, node) if sib_left else node_hash(node, sib)
        return node

    def directions(self) -> str:
        """Root-to-leaf direction string over ``L``/``R``."""
        return "".join("R" if s.sibling_left else "L" for s in reversed(self.steps))

    def encode(self) -> bytes:
        out = [lp(self.leaf), u8(len(self.steps))]
        for sib, sib_left in self.steps:
            out.append(sib + (b"\x01" if sib_left else b"\x00"))
        return b"".join(out)

    @classmethod
    def read(cls, r: Reader) -> LeafPath:
        leaf = r.lp()
        steps = []
        for _ in range(r.u8()):
            sib = r.take(DIGEST_SIZE)
            flag = r.u8()
            if flag > 1:
                raise ValueError("bad direction bit")
            steps.append(PathStep(sib, bool(flag)))
        return cls(leaf, tuple(steps))


@dataclass(frozen=True)
class MerkleProof:
    """Membership proof (one path for the value itself) or non-membership
    proof (zero paths for the empty tree, one boundary leaf, or the two
    leaves bracketing the absent value)."""

    kind: ProofKind
    paths: tuple[LeafPath, ...]

    @property
    def path_length(self) -> int:
        return max((len(p.steps) for p in self.paths), default=0)

    def encode(self) -> bytes:
        return u8(int(self.kind)) + u8(len(self.paths)) + b"".join(p.encode() for p in self.paths)

    @classmethod
    def read(cls, r: Reader) -> MerkleProof:
        kind = ProofKind(r.u8())
        count = r.u8()
        if count > 2:
            raise ValueError("too many paths")
        return cls(kind, tuple(LeafPath.read(r) for _ in range(count)))

    @classmethod
    def decode(cls, data: bytes) -> MerkleProof:
        r = Reader(data)
        proof = cls.read(r)
        r.done()
        return proof


class SortedMerkleTree:
    def __init__(self, leaves: list[bytes], levels: list[list[bytes]]):
        self.leaves = leaves
        self.levels = levels

    @classmethod
    def build(cls, values: Iterable[bytes]) -> SortedMerkleTree:
        leaves = sorted(values)
        for a, b in zip(leaves, leaves[1:]):
            if a == b:
                raise ValueError(f"duplicate leaf {a.hex()}")
        if not leaves:
            return cls([], [])
        level = [leaf_hash(v) for v in leaves]
        levels = [level]
        while len(level) > 1:
            nxt = [node_hash(level[i], level[i + 1]) for i in range(0, len(level) - 1, 2)]
            if len(level) % 2:
                nxt.append(level[-1])
            levels.append(nxt)
            level = nxt
        return cls(leaves, levels)

    @property
    def root(self) -> bytes:
        return self.levels[-1][0] if self.levels else EMPTY_ROOT

    def __len__(self) -> int:
        return len(self.leaves)

    def __contains__(self, value: bytes) -> bool:
        i = bisect.bisect_left(self.leaves, value)
        return i < len(self.leaves) and self.leaves[i] == value

    def path(self, index: int) -> LeafPath:
        steps = []
        i = index
        for level in self.levels[:-1]:
            sib = i ^ 1
            if sib < len(level):
                steps.append(PathStep(level[sib], sib < i))
            i //= 2
        return LeafPath(self.leaves[index], tuple(steps))

    def prove(self, value: bytes) -> MerkleProof:
        if not self.leaves:
            return MerkleProof(ProofKind.NON_MEMBERSHIP, ())
        i = bisect.bisect_left(self.leaves, value)
        if i < len(self.leaves) and self.leaves[i] == value:
            return MerkleProof(ProofKind.MEMBERSHIP, (self.path(i),))
        if i == 0:
            return MerkleProof(ProofKind.NON_MEMBERSHIP, (self.path(0),))
        if i == len(self.leaves):
            return MerkleProof(ProofKind.NON_MEMBERSHIP, (self.path(i - 1),))
        return MerkleProof(ProofKind.NON_MEMBERSHIP, (self.path(i - 1), self.path(i)))


def build_tree(values: Iterable[bytes]) -> SortedMerkleTree:
    return SortedMerkleTree.build(values)


def _adjacent(left: str, right: str) -> bool:
    if len(left) == len(right) == 0:
        return False
    p = 0
    while p < min(len(left), len(right)) and left[p] == right[p]:
        p += 1
    if p >= len(left) or p >= len(right):
        return False
    return (left[p] == "L" and right[p] == "R"
            and set(left[p + 1:]) <= {"R"} and set(right[p + 1:]) <= {"L"})


def verify_proof(root: bytes, value: bytes, proof: MerkleProof) -> Verdict:
    try:
        paths = proof.paths
        if proof.kind == ProofKind.MEMBERSHIP:
            if len(paths) == 1 and paths[0].leaf == value and paths[0].root() == root:
                return Verdict.MEMBER
            return Verdict.INVALID
        if proof.kind != ProofKind.NON_MEMBERSHIP:
            return Verdict.INVALID
        if not paths:
            return Verdict.NON_MEMBER if root == EMPTY_ROOT else Verdict.INVALID
        if any(p.root() != root for p in paths):
            return Verdict.INVALID
        if len(paths) == 1:
            leaf, dirs = paths[0].leaf, paths[0].directions()
            if value < leaf and set(dirs) <= {"L"}:
                return Verdict.NON_MEMBER
            if value > leaf and set(dirs) <= {"R"}:
                return Verdict.NON_MEMBER
            return Verdict.INVALID
        if len(paths) == 2:
            lo, hi = paths
            if lo.leaf < value < hi.leaf and _adjacent(lo.directions(), hi.directions()):
                return Verdict.NON_MEMBER
        return Verdict.INVALID
    except (TypeError, AttributeError, ValueError):
        return Verdict.INVALID
