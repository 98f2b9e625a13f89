"""Simulated ledger: block production, finality, randomness and contract rules.

There is no proof-of-work race. Block authorship is scheduled from an
``AdversaryModel`` under the chain-quality constraint (no run of ``kappa``
consecutive adversarial blocks) and forks are never produced, so
persistence holds by construction and is asserted instead of analysed.

Time is measured by the finalized height ``F = tip - tau + 1``. A
transaction submitted while the finalized height is ``h`` is placed in the
next block and becomes final exactly when ``F`` reaches ``h + tau``.
Validation happens when a transaction is submitted (miners refuse invalid
ones), against the finalized state plus whatever is already pending.
"""

from __future__ import annotations

import enum
import hashlib
import random
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property
from typing import Callable, Iterable, Optional, Sequence, Union


from .encoding import H, lp, truncate_bits, u8, u32, u64, uint
from .merkle import EMPTY_ROOT, MerkleProof, SortedMerkleTree, Verdict, verify_proof
from .vrf import SecurityParams, VrfEvaluation, threshold, vrf_verify


class ChainError(Exception):
    pass


class Miner(enum.IntEnum):
    HONEST = 0
    ADVERSARIAL = 1


@dataclass(frozen=True)
class BlockHeader:
    height: int
    parent: bytes
    tx_root: bytes
    miner: Miner
    entropy: int
    kappa: int

    def encode(self) -> bytes:
        return (u64(self.height) + self.parent + self.tx_root + u8(int(self.miner))
                + uint(self.entropy, self.kappa // 8))

    @cached_property
    def digest(self) -> bytes:
        return H(self.encode())


# -- transactions ------------------------------------------------------------

class TxKind(str, enum.Enum):
    REGISTRATION = "registration"
    INITIAL_SELECTION = "initial_selection"
    DISPUTE = "dispute"
    FINAL_SELECTION = "final_selection"
    BASELINE_REGISTRATION = "baseline_registration"
    BASELINE_SELECTION = "baseline_selection"


SERVER = "server"


class _Tx:
    kind: TxKind

    def body(self) -> bytes:
        raise NotImplementedError

    def encode(self) -> bytes:
        return lp(self.kind.value.encode()) + self.body()

    @cached_property
    def txid(self) -> bytes:
        return H(self.encode())

    @property
    def size(self) -> int:
        return len(self.encode())

    @property
    def payer(self) -> str:
        return SERVER


@dataclass(frozen=True)
class Registration(_Tx):
    root: bytes
    kind = TxKind.REGISTRATION

    def body(self):
        return lp(self.root)


@dataclass(frozen=True)
class InitialSelection(_Tx):
    round: int
    root: bytes
    kind = TxKind.INITIAL_SELECTION

    def body(self):
        return u32(self.round) + lp(self.root)


@dataclass(frozen=True)
class Dispute(_Tx):
    round: int
    pk: bytes
    evaluation: VrfEvaluation
    reg_proof: MerkleProof
    kappa: int
    kind = TxKind.DISPUTE

    def body(self):
        return u32(self.round) + lp(self.pk) + self.evaluation.encode(self.kappa) + self.reg_proof.encode()

    @property
    def payer(self) -> str:
        return "client:" + self.pk.hex()


@dataclass(frozen=True)
class FinalSelection(_Tx):
    """Root of the dispute pool plus an inclusion proof per disputer, so
    miners can check containment without the full set."""

    round: int
    root: bytes
    inclusion: tuple[MerkleProof, ...] = ()
    kind = TxKind.FINAL_SELECTION

    def body(self):
        return u32(self.round) + lp(self.root) + u32(len(self.inclusion)) + b"".join(
            lp(p.encode()) for p in self.inclusion)


@dataclass(frozen=True)
class BaselineRegistration(_Tx):
    pks: tuple[bytes, ...]
    kind = TxKind.BASELINE_REGISTRATION

    def body(self):
        return u32(len(self.pks)) + b"".join(lp(pk) for pk in self.pks)


@dataclass(frozen=True)
class BaselineSelection(_Tx):
    """Per-round selection record of the baseline protocol."""

    round: int
    pks: tuple[bytes, ...]
    kind = TxKind.BASELINE_SELECTION

    def body(self):
        return u32(self.round) + u32(len(self.pks)) + b"".join(lp(pk) for pk in self.pks)


Transaction = Union[Registration, InitialSelection, Dispute, FinalSelection,
                    BaselineRegistration, BaselineSelection]


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    txs: tuple


# -- schedule and contract -------------------------------------------------

@dataclass(frozen=True)
class RoundSchedule:
    """Round ``t`` starts at finalized height ``start + 2*tau*t``; its
    checkpoints are the start, start+tau and start+2*tau."""

    start: int
    tau: int

    def __post_init__(self):
        if self.tau < 1 or self.start < 0:
            raise ValueError("need tau >= 1 and start >= 0")

    def start_of(self, t: int) -> int:
        return self.start + 2 * self.tau * t

    def checkpoints(self, t: int) -> tuple[int, int, int]:
        ell = self.start_of(t)
        return ell, ell + self.tau, ell + 2 * self.tau

    def round_starting_at(self, height: int) -> Optional[int]:
        off = height - self.start
        if off >= 0 and off % (2 * self.tau) == 0:
            return off // (2 * self.tau)
        return None


@dataclass(frozen=True)
class SelectionContract:
    params: SecurityParams
    c: Fraction
    schedule: RoundSchedule

    @property
    def threshold(self) -> int:
        return threshold(self.c, self.params.kappa)


@dataclass
class AdversaryModel:
    grind_budget: int = 1
    miner_fraction: float = 0.0

    def validate(self, kappa: int) -> None:
        if not 0 <= self.grind_budget <= kappa:
            raise ChainError(f"grind budget {self.grind_budget} outside [0, kappa={kappa}]")
        if not 0.0 <= self.miner_fraction < 1.0:
            raise ChainError("miner_fraction must lie in [0, 1): chain quality needs honest blocks")


class OpMeter(Counter):
    """Counts of contract-side operations (hash, vrf_verify, merkle_step, ...)."""


# -- ledger ------------------------------------------------------------------

@dataclass(frozen=True)
class LedgerView:
    """Immutable snapshot: the ledger's finalized prefix up to ``height``.
    Blocks are append-only, so holding the ledger reference is safe."""

    ledger: "Ledger"
    height: int

    def header(self, h: int) -> BlockHeader:
        if h > self.height:
            raise ChainError(f"height {h} not finalized in this view")
        return self.ledger.block(h).header

    @property
    def tip_digest(self) -> bytes:
        return self.ledger.block(self.height).header.digest

    def _visible(self, entry):
        return entry is not None and entry[1] <= self.height

    def contains(self, txid: bytes) -> bool:
        h = self.ledger.tx_height.get(txid)
        return h is not None and h <= self.height

    def registration(self) -> Optional[Registration]:
        e = self.ledger.registration
        return e[0] if self._visible(e) else None

    def initial_selection(self, t: int) -> Optional[InitialSelection]:
        e = self.ledger.initial.get(t)
        return e[0] if self._visible(e) else None

    def final_selection(self, t: int) -> Optional[FinalSelection]:
        e = self.ledger.final.get(t)
        return e[0] if self._visible(e) else None

    def disputes(self, t: int) -> list[Dispute]:
        return [tx for tx, h in self.ledger.disputes.get(t, ()) if h <= self.height]

    def randomness(self, round_start: int) -> int:
        return extract_randomness(self, round_start, self.ledger.params)


def randomness_from_headers(headers: Iterable[BlockHeader], kappa: int) -> int:
    h = hashlib.sha256()
    for hd in headers:
        h.update(hd.encode())
    return truncate_bits(h.digest(), kappa)


def extract_randomness(view: LedgerView, round_start: int, params: SecurityParams) -> int:
    """Hash of the ``kappa`` finalized headers preceding ``round_start``."""
    kappa = params.kappa
    lo = round_start - kappa
    if lo < 0 or round_start - 1 > view.height:
        raise ChainError(f"need {kappa} finalized blocks before height {round_start}")
    cache = view.ledger._rnd_cache
    if round_start not in cache:
        cache[round_start] = randomness_from_headers(
            (view.ledger.block(h).header for h in range(lo, round_start)), kappa)
    return cache[round_start]


def rnd_bytes(rnd: int, params: SecurityParams) -> bytes:
    """Canonical VRF input: the kappa-bit randomness, big-endian."""
    return uint(rnd, params.rnd_bytes)


CandidateSelector = Callable[["Ledger", Sequence[BlockHeader]], int]


class Ledger:
    def __init__(self, params: SecurityParams, tau: int, contract: Optional[SelectionContract] = None,
                 seed: int = 0):
        if tau < 1:
            raise ValueError("tau must be >= 1")
        self.params = params
        self.tau = tau
        self.contract = contract
        self.rng = random.Random(seed)
        self.blocks: list[Block] = []
        self.base_height = 0
        self.pending: list = []
        self.rejected: list = []
        self.tx_height: dict[bytes, int] = {}
        self.registration = None
        self.baseline_registry: Optional[frozenset] = None
        self.initial: dict[int, tuple] = {}
        self.final: dict[int, tuple] = {}
        self.disputes: dict[int, list] = {}
        self.grind_log: list[tuple[int, int, int]] = []
        self.ops: dict[bytes, OpMeter] = {}
        self._rnd_cache: dict[int, int] = {}
        self._adv_run = 0
        self._append(Miner.HONEST, self._honest_entropy())
        for _ in range(tau - 1):
            self._append(Miner.HONEST, self._honest_entropy())

    @property
    def kappa(self) -> int:
        return self.params.kappa

    @property
    def tip_height(self) -> int:
        return self.base_height + len(self.blocks) - 1

    def block(self, h: int) -> Block:
        if not self.base_height <= h <= self.tip_height:
            raise ChainError(f"block {h} pruned or not yet produced")
        return self.blocks[h - self.base_height]

    def prune_before(self, height: int) -> None:
        """Drop blocks below ``height`` to bound memory in long runs. Views
        and randomness below that height become unavailable."""
        cut = min(height, self.tip_height) - self.base_height
        if cut > 0:
            del self.blocks[:cut]
            self.base_height += cut

    @property
    def finalized_height(self) -> int:
        return max(0, self.tip_height - self.tau + 1)

    def view(self, height: Optional[int] = None) -> LedgerView:
        f = self.finalized_height
        if height is None:
            height = f
        if not 0 <= height <= f:
            raise ChainError(f"height {height} is not finalized (finalized: {f})")
        return LedgerView(self, height)

    def _honest_entropy(self) -> int:
        return self.rng.getrandbits(self.kappa)

    def _make_header(self, miner: Miner, entropy: int, txs: tuple) -> BlockHeader:
        parent = self.blocks[-1].header.digest if self.blocks else b"\x00" * 32
        tx_root = SortedMerkleTree.build(tx.txid for tx in txs).root if txs else EMPTY_ROOT
        return BlockHeader(self.tip_height + 1, parent, tx_root, miner, entropy, self.kappa)

    def _pending_txs(self) -> tuple:
        # canonical order, so submission order never changes a header
        return tuple(sorted((tx for tx, _ in self.pending), key=lambda tx: tx.txid))

    def _append(self, miner: Miner, entropy: int, header: Optional[BlockHeader] = None) -> None:
        txs = self._pending_txs()
        if header is None:
            header = self._make_header(miner, entropy, txs)
        self.pending = []
        height = header.height
        self.blocks.append(Block(header, txs))
        self._adv_run = self._adv_run + 1 if miner == Miner.ADVERSARIAL else 0
        for tx in txs:
            self.tx_height[tx.txid] = height
            if isinstance(tx, Registration):
                self.registration = (tx, height)
            elif isinstance(tx, InitialSelection):
                self.initial.setdefault(tx.round, (tx, height))
            elif isinstance(tx, FinalSelection):
                self.final.setdefault(tx.round, (tx, height))
            elif isinstance(tx, Dispute):
                self.disputes.setdefault(tx.round, []).append((tx, height))
            elif isinstance(tx, BaselineRegistration):
                self.baseline_registry = frozenset(tx.pks)

    def submit(self, tx, meter: Optional[OpMeter] = None) -> bool:
        meter = meter if meter is not None else OpMeter()
        self.ops[tx.txid] = meter
        ok = validate_transaction(tx, self.view(), self.contract, pending=[p for p, _ in self.pending],
                                  meter=meter)
        if ok:
            self.pending.append((tx, self.finalized_height))
        else:
            self.rejected.append((tx, self.finalized_height))
        return ok

    def adversarial_window_ok(self) -> bool:
        return self._adv_run < self.kappa


def advance_chain(ledger: Ledger, n_blocks: int, adversary: Optional[AdversaryModel] = None,
                  candidate_selector: Optional[CandidateSelector] = None,
                  forced_adversarial: Iterable[int] = (), rng: Optional[random.Random] = None
                  ) -> Ledger:
    """Append ``n_blocks`` blocks.

    Authorship is adversarial with probability ``miner_fraction`` (drawn
    from ``rng``, the adversary's randomness) or whenever the height is in
    ``forced_adversarial``, but never for the ``kappa``-th consecutive
    block. When the adversary authors a block and a selector is given, it
    draws up to ``grind_budget`` entropy candidates and commits the one the
    selector returns.
    """
    if n_blocks < 1:
        raise ValueError("n_blocks must be >= 1")
    adversary = adversary or AdversaryModel()
    adversary.validate(ledger.kappa)
    forced = set(forced_adversarial)
    rng = rng if rng is not None else ledger.rng
    for _ in range(n_blocks):
        height = ledger.tip_height + 1
        adversarial = height in forced or (
            adversary.miner_fraction > 0 and rng.random() < adversary.miner_fraction)
        if adversarial and ledger._adv_run + 1 >= ledger.kappa:
            if height in forced:
                raise ChainError(f"forcing block {height} adversarial breaks chain quality")
            adversarial = False
        if not adversarial:
            ledger._append(Miner.HONEST, ledger._honest_entropy())
            continue
        g = max(1, adversary.grind_budget)
        txs = ledger._pending_txs()
        if candidate_selector is None:
            entropy = rng.getrandbits(ledger.kappa)
            ledger._append(Miner.ADVERSARIAL, entropy)
            continue
        candidates = [ledger._make_header(Miner.ADVERSARIAL, rng.getrandbits(ledger.kappa), txs)
                      for _ in range(g)]
        idx = candidate_selector(ledger, candidates)
        if not 0 <= idx < len(candidates) or len(candidates) > g:
            raise ChainError("selector violated the grinding budget")
        ledger.grind_log.append((height, len(candidates), idx))
        ledger._append(Miner.ADVERSARIAL, candidates[idx].entropy, header=candidates[idx])
    return ledger


def prospective_randomness(ledger: Ledger, closing: BlockHeader) -> int:
    """Randomness a round starting right after ``closing`` would extract."""
    return prospective_randomness_many(ledger, [closing])[0]


def prospective_randomness_many(ledger: Ledger, candidates: Sequence[BlockHeader]) -> list[int]:
    """``prospective_randomness`` for sibling candidates sharing one prefix."""
    kappa = ledger.kappa
    height = candidates[0].height
    prefix = hashlib.sha256()
    for h in range(height + 1 - kappa, height):
        prefix.update(ledger.block(h).header.encode())
    out = []
    for hd in candidates:
        if hd.height != height:
            raise ChainError("candidates must share a height")
        h = prefix.copy()
        h.update(hd.encode())
        out.append(truncate_bits(h.digest(), kappa))
    return out


# -- validation --------------------------------------------------------------

def _registry_root(view: LedgerView) -> Optional[bytes]:
    reg = view.registration()
    return reg.root if reg is not None else None


def validate_transaction(tx, view: LedgerView, contract: Optional[SelectionContract],
                         pending: Sequence = (), meter: Optional[OpMeter] = None) -> bool:
    """Contract rules miners apply before including ``tx``."""
    meter = meter if meter is not None else OpMeter()
    F = view.height
    if isinstance(tx, BaselineRegistration):
        meter["storage_write"] += len(tx.pks)
        return (all(isinstance(pk, bytes) and pk for pk in tx.pks) and len(set(tx.pks)) == len(tx.pks)
                and view.ledger.baseline_registry is None)
    if isinstance(tx, BaselineSelection):
        reg = view.ledger.baseline_registry
        if reg is None:
            return False
        # the contract recomputes every registered client's score
        meter["hash"] += len(reg)
        meter["storage_read"] += len(reg)
        return all(pk in reg for pk in tx.pks)
    if isinstance(tx, Registration):
        meter["storage_read"] += 1
        return (len(tx.root) == 32 and view.registration() is None
                and not any(isinstance(p, Registration) for p in pending))
    if contract is None:
        return False
    sched, tau = contract.schedule, contract.schedule.tau
    if not isinstance(getattr(tx, "round", None), int) or tx.round < 0:
        return False
    ell = sched.start_of(tx.round)

    if isinstance(tx, InitialSelection):
        meter["storage_read"] += 1
        if len(tx.root) != 32 or not ell <= F <= ell + tau:
            return False
        if view.ledger.initial.get(tx.round) is not None:
            return False
        return not any(isinstance(p, InitialSelection) and p.round == tx.round for p in pending)

    if isinstance(tx, Dispute):
        if not ell <= F <= ell + tau:
            return False
        root = _registry_root(view)
        if root is None:
            return False
        meter["merkle_step"] += 1 + tx.reg_proof.path_length
        if verify_proof(root, tx.pk, tx.reg_proof) != Verdict.MEMBER:
            return False
        meter["hash"] += 1
        rnd = extract_randomness(view, ell, contract.params)
        meter["vrf_verify"] += 1
        if not vrf_verify(tx.pk, rnd_bytes(rnd, contract.params), tx.evaluation, contract.params):
            return False
        if tx.evaluation.output >= contract.threshold:
            return False
        meter["storage_read"] += 1
        seen = {d.pk for d, _ in view.ledger.disputes.get(tx.round, ())}
        seen |= {p.pk for p in pending if isinstance(p, Dispute) and p.round == tx.round}
        return tx.pk not in seen

    if isinstance(tx, FinalSelection):
        if len(tx.root) != 32 or F < ell + 2 * tau:
            return False
        if view.ledger.final.get(tx.round) is not None:
            return False
        if any(isinstance(p, FinalSelection) and p.round == tx.round for p in pending):
            return False
        disputers = {d.pk for d, _ in view.ledger.disputes.get(tx.round, ())}
        disputers |= {p.pk for p in pending if isinstance(p, Dispute) and p.round == tx.round}
        meter["storage_read"] += 1 + len(disputers)
        proven = set()
        for proof in tx.inclusion:
            meter["merkle_step"] += 1 + proof.path_length
            if proof.paths and verify_proof(tx.root, proof.paths[0].leaf, proof) == Verdict.MEMBER:
                proven.add(proof.paths[0].leaf)
        return disputers <= proven

    return False
