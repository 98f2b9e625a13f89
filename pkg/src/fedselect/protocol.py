"""Registration and the five-step selection round, the PVer predicate and
the (insecure) baseline selection rule.

Round ``t`` with start height ``l`` (finalized height, see :mod:`.chain`):

* ``l``: clients derive ``rnd`` from the chain and run the VRF; qualified
  clients message the server, which verifies the messages, commits the
  root of ``P_t`` (final at ``l + tau``) and hands out membership proofs.
* ``l + tau``: a qualified client without a valid proof against the
  on-chain root files a dispute (final at ``l + 2*tau``).
* ``l + 2*tau``: the server commits the root of ``P_f``; the contract
  rejects it unless every disputer is proven to be inside.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .chain import (
    Dispute,
    FinalSelection,
    InitialSelection,
    Ledger,
    LedgerView,
    Registration,
    RoundSchedule,
    SelectionContract,
    advance_chain,
    rnd_bytes,
)
from .encoding import H, lp, truncate_bits, u32
from .merkle import MerkleProof, SortedMerkleTree, Verdict, verify_proof
from .vrf import KeyPair, SecurityParams, VrfEvaluation, is_qualified, threshold, vrf_prove, vrf_verify

__all__ = [
    "ClientState", "ServerState", "ServerBehavior", "SelectionProof", "QualificationMessage",
    "PVer", "RoundSchedule", "register", "client_elect", "server_initial_selection",
    "client_dispute", "server_final_selection", "assemble_proof", "pver", "selected_pool",
    "baseline_select", "ProtocolError",
]


class ProtocolError(Exception):
    pass


class PVer(enum.Enum):
    SELECTED = 1
    NOT_SELECTED = 0
    INVALID = None


@dataclass(frozen=True)
class QualificationMessage:
    pk: bytes
    evaluation: VrfEvaluation


@dataclass(frozen=True)
class SelectionProof:
    """Proof that a client is (not) selected in round ``round``.

    A proof with no evaluation is empty. ``initial_proof`` may be absent
    when ``final_proof`` shows membership of the dispute pool.
    """

    round: int
    pk: bytes
    evaluation: Optional[VrfEvaluation] = None
    initial_txid: Optional[bytes] = None
    initial_proof: Optional[MerkleProof] = None
    final_txid: Optional[bytes] = None
    final_proof: Optional[MerkleProof] = None

    @property
    def empty(self) -> bool:
        return self.evaluation is None

    def encode(self, kappa: int) -> bytes:
        def opt(b):
            return b"\x00" if b is None else b"\x01" + lp(b)

        ev = None if self.evaluation is None else self.evaluation.encode(kappa)
        return (u32(self.round) + lp(self.pk) + opt(ev) + opt(self.initial_txid)
                + opt(None if self.initial_proof is None else self.initial_proof.encode())
                + opt(self.final_txid)
                + opt(None if self.final_proof is None else self.final_proof.encode()))


@dataclass
class ClientState:
    cid: int
    keypair: KeyPair
    honest: bool = True
    reg_proof: Optional[MerkleProof] = None
    ledger_view: Optional[LedgerView] = None
    round_eval: dict[int, VrfEvaluation] = field(default_factory=dict)
    received_proofs: dict[int, SelectionProof] = field(default_factory=dict)

    @property
    def pk(self) -> bytes:
        return self.keypair.pk


@dataclass
class ServerBehavior:
    """What a semi-malicious server does differently from an honest one.

    It can drop qualified clients from ``P_t`` and/or withhold their proofs,
    try to leave disputers out of ``P_f``, add unqualified colluders to
    ``P_t``, and hand observers forged proofs. Forging VRF or Merkle proofs
    is outside its power.
    """

    drop_fraction: float = 0.0
    drop_pks: frozenset = frozenset()
    withhold_only: bool = False
    omit_disputer_in_final: bool = False
    include_unqualified: frozenset = frozenset()
    equivocate: bool = False

    @property
    def honest(self) -> bool:
        return (self.drop_fraction == 0 and not self.drop_pks and not self.omit_disputer_in_final
                and not self.include_unqualified and not self.equivocate)


@dataclass
class RoundRecord:
    t: int
    rnd: int
    messages: dict = field(default_factory=dict)
    verified: dict = field(default_factory=dict)
    p_t: Optional[SortedMerkleTree] = None
    initial_tx: Optional[InitialSelection] = None
    dropped: set = field(default_factory=set)
    withheld: set = field(default_factory=set)
    issued: dict = field(default_factory=dict)
    p_f: Optional[SortedMerkleTree] = None
    final_tx: Optional[FinalSelection] = None
    final_rejections: int = 0


@dataclass
class ServerState:
    registry: list
    reg_tree: SortedMerkleTree
    contract: SelectionContract
    behavior: ServerBehavior = field(default_factory=ServerBehavior)
    colluder_secrets: dict = field(default_factory=dict)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    rounds: dict = field(default_factory=dict)

    @property
    def params(self) -> SecurityParams:
        return self.contract.params


# -- registration ------------------------------------------------------------

def register(clients: Sequence[ClientState], server: ServerState, ledger: Ledger,
             finalize: bool = True, eager: bool = True) -> Registration:
    """Commit the registry root on chain and hand each client its proof.

    With ``eager=False`` proofs are left for the caller to fetch from
    ``server.reg_tree`` when needed, which saves memory for huge registries.
    """
    pks = [cl.pk for cl in clients]
    if len(set(pks)) != len(pks):
        raise ProtocolError("duplicate public key in registration")
    tree = SortedMerkleTree.build(pks)
    server.registry = pks
    server.reg_tree = tree
    tx = Registration(tree.root)
    if not ledger.submit(tx):
        raise ProtocolError("registration rejected")
    if finalize:
        advance_chain(ledger, ledger.tau)
    if eager:
        for cl in clients:
            cl.reg_proof = tree.prove(cl.pk)
    return tx


# -- selection round ---------------------------------------------------------

def client_elect(client: ClientState, t: int, rnd: int, c, params: SecurityParams
                 ) -> Optional[QualificationMessage]:
    ev = vrf_prove(client.keypair.sk, rnd_bytes(rnd, params), params)
    client.round_eval[t] = ev
    if is_qualified(ev, c, params):
        return QualificationMessage(client.pk, ev)
    return None


def _initial_stage_proof(rec: RoundRecord, pk: bytes, ev: VrfEvaluation) -> SelectionProof:
    return SelectionProof(rec.t, pk, ev, rec.initial_tx.txid, rec.p_t.prove(pk))


def server_initial_selection(server: ServerState, t: int, rnd: int,
                             messages: Iterable[QualificationMessage], ledger: Ledger
                             ) -> tuple[InitialSelection, dict[bytes, SelectionProof]]:
    """Verify messages, commit ``MRoot(P_t)`` and return the proofs sent out."""
    params, contract = server.params, server.contract
    rec = RoundRecord(t, rnd)
    server.rounds[t] = rec
    data = rnd_bytes(rnd, params)
    thr = contract.threshold
    for msg in messages:
        rec.messages[msg.pk] = msg.evaluation
        if (msg.pk in server.reg_tree and msg.evaluation.output < thr
                and vrf_verify(msg.pk, data, msg.evaluation, params)):
            rec.verified[msg.pk] = msg.evaluation

    b = server.behavior
    candidates = sorted(rec.verified)
    dropped = {pk for pk in candidates if pk in b.drop_pks}
    if b.drop_fraction > 0:
        dropped |= {pk for pk in candidates if server.rng.random() < b.drop_fraction}
    rec.withheld = set(dropped)
    rec.dropped = set() if b.withhold_only else set(dropped)
    pool = {pk for pk in candidates if pk not in rec.dropped}
    extras = {}
    for pk in b.include_unqualified:
        sk = server.colluder_secrets.get(pk)
        if sk is not None and pk in server.reg_tree:
            extras[pk] = vrf_prove(sk, data, params)
    pool |= set(extras)
    rec.p_t = SortedMerkleTree.build(pool)
    rec.initial_tx = InitialSelection(t, rec.p_t.root)
    if not ledger.submit(rec.initial_tx):
        raise ProtocolError(f"initial selection for round {t} rejected")
    evals = {**rec.verified, **extras}
    for pk in sorted(pool):
        rec.issued[pk] = _initial_stage_proof(rec, pk, evals[pk])
    sent = {pk: pr for pk, pr in rec.issued.items() if pk not in rec.withheld}
    return rec.initial_tx, sent


def client_dispute(client: ClientState, t: int, view: LedgerView, contract: SelectionContract
                   ) -> Optional[Dispute]:
    """Dispute iff qualified and no valid proof against the on-chain root."""
    ev = client.round_eval.get(t)
    if ev is None or ev.output >= contract.threshold:
        return None
    onchain = view.initial_selection(t)
    proof = client.received_proofs.get(t)
    if (onchain is not None and proof is not None and proof.initial_txid == onchain.txid
            and proof.initial_proof is not None
            and verify_proof(onchain.root, client.pk, proof.initial_proof) == Verdict.MEMBER):
        return None
    return Dispute(t, client.pk, ev, client.reg_proof, contract.params.kappa)


def server_final_selection(server: ServerState, t: int, ledger: Ledger
                           ) -> tuple[FinalSelection, dict[bytes, MerkleProof]]:
    """Commit ``MRoot(P_f)``; a rejected attempt is corrected and resubmitted.

    Returns the transaction and the ``P_f`` proofs sent to the clients that
    got a first-stage proof. Disputers read theirs from the transaction.
    """
    rec = server.rounds[t]
    disputers = sorted({d.pk for d in ledger.view().disputes(t)})
    attempt = set(disputers)
    if server.behavior.omit_disputer_in_final and disputers:
        attempt.discard(disputers[int(server.rng.integers(len(disputers)))])
    for pool in (attempt, set(disputers)):
        tree = SortedMerkleTree.build(pool)
        tx = FinalSelection(t, tree.root, tuple(tree.prove(pk) for pk in disputers))
        if ledger.submit(tx):
            rec.p_f, rec.final_tx = tree, tx
            sent = {pk: tree.prove(pk) for pk in rec.issued if pk not in rec.withheld}
            return tx, sent
        rec.final_rejections += 1
    raise ProtocolError(f"final selection for round {t} rejected twice")


def assemble_proof(client: ClientState, t: int, view: LedgerView) -> SelectionProof:
    """Client-side assembly of the complete proof about itself.

    The final-pool proof of a disputer is read from the on-chain
    ``FinalSelection`` so it does not depend on the server delivering it.
    """
    ev = client.round_eval.get(t)
    if ev is None:
        return SelectionProof(t, client.pk)
    stage1 = client.received_proofs.get(t)
    init_tx = view.initial_selection(t)
    fin_tx = view.final_selection(t)
    init_proof = final_proof = None
    if stage1 is not None and init_tx is not None and stage1.initial_txid == init_tx.txid:
        init_proof = stage1.initial_proof
    if fin_tx is not None:
        for p in fin_tx.inclusion:
            if p.paths and p.paths[0].leaf == client.pk:
                final_proof = p
                break
    if final_proof is None and stage1 is not None:
        final_proof = stage1.final_proof
    return SelectionProof(t, client.pk, ev,
                          None if init_tx is None else init_tx.txid, init_proof,
                          None if fin_tx is None else fin_tx.txid, final_proof)


def pver(view: LedgerView, omega: Optional[SelectionProof], contract: SelectionContract) -> PVer:
    """Selected (1), not selected (0) or invalid proof (bottom) in ``view``.

    Bottom covers: empty proof, failed VRF check, commitments missing from
    the view or not the round's canonical ones, and Merkle proofs that
    neither prove membership nor both prove non-membership. A 0 verdict
    thus needs either an unqualified output or two valid non-membership
    proofs, which is what keeps honest views from disagreeing.
    """
    try:
        if omega is None or omega.empty:
            return PVer.INVALID
        params = contract.params
        ell = contract.schedule.start_of(omega.round)
        if view.height < ell - 1:
            return PVer.INVALID
        rnd = view.randomness(ell)
        if not vrf_verify(omega.pk, rnd_bytes(rnd, params), omega.evaluation, params):
            return PVer.INVALID
        init_tx = view.initial_selection(omega.round)
        fin_tx = view.final_selection(omega.round)
        if (init_tx is None or fin_tx is None or omega.initial_txid != init_tx.txid
                or omega.final_txid != fin_tx.txid):
            return PVer.INVALID
        if omega.evaluation.output >= contract.threshold:
            return PVer.NOT_SELECTED
        verdicts = []
        for root, proof in ((init_tx.root, omega.initial_proof), (fin_tx.root, omega.final_proof)):
            verdicts.append(Verdict.INVALID if proof is None else verify_proof(root, omega.pk, proof))
        if Verdict.MEMBER in verdicts:
            return PVer.SELECTED
        if verdicts == [Verdict.NON_MEMBER, Verdict.NON_MEMBER]:
            return PVer.NOT_SELECTED
        return PVer.INVALID
    except Exception:  # totality: malformed input of any shape is bottom
        return PVer.INVALID


def selected_pool(verdicts: Iterable[tuple[int, int, PVer]], honest: Iterable[int]) -> set[int]:
    """``{i : some honest observer j returned 1}`` from (subject, observer, verdict) tuples."""
    honest = set(honest)
    return {i for i, j, v in verdicts if j in honest and v == PVer.SELECTED}


# -- baseline ----------------------------------------------------------------

def baseline_score(t: int, root: bytes, pk: bytes, kappa: int) -> int:
    return truncate_bits(H(u32(t), root, pk), kappa)


def baseline_select(t: int, registry: Sequence[bytes], c, params: SecurityParams,
                    root: Optional[bytes] = None) -> list[bytes]:
    """Deterministic pool: ``pk`` selected iff H(t || MRoot(U) || pk) < c 2^kappa."""
    if not registry:
        raise ProtocolError("empty registry")
    if root is None:
        root = SortedMerkleTree.build(registry).root
    thr = threshold(c, params.kappa)
    return [pk for pk in registry if baseline_score(t, root, pk, params.kappa) < thr]
