import dataclasses
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedselect.chain import Ledger, RoundSchedule, SelectionContract, advance_chain
from fedselect.merkle import MerkleProof, SortedMerkleTree, Verdict, verify_proof
from fedselect.protocol import (
    ClientState,
    PVer,
    ProtocolError,
    QualificationMessage,
    SelectionProof,
    ServerBehavior,
    ServerState,
    assemble_proof,
    baseline_select,
    client_dispute,
    client_elect,
    pver,
    register,
    selected_pool,
    server_final_selection,
    server_initial_selection,
)
from fedselect.vrf import SecurityParams, VrfEvaluation, vrf_gen, vrf_prove

P = SecurityParams(kappa=64, strict=False)
TAU = 3
C = Fraction(1, 3)


class World:
    """One hand-driven round with every party's step exposed."""

    def __init__(self, n=30, behavior=None, colluders=(), seed=0, params=P):
        keys = [vrf_gen(params, b"proto-%d-%d" % (seed, i)) for i in range(n)]
        self.params = params
        self.clients = [ClientState(i, kp, honest=i not in colluders) for i, kp in enumerate(keys)]
        self.schedule = RoundSchedule(2 * TAU + params.kappa, TAU)
        self.contract = SelectionContract(params, C, self.schedule)
        self.ledger = Ledger(params, TAU, self.contract, seed=seed)
        self.server = ServerState([], SortedMerkleTree.build([]), self.contract,
                                  behavior or ServerBehavior(),
                                  colluder_secrets={keys[i].pk: keys[i].sk for i in colluders},
                                  rng=np.random.default_rng(seed))
        register(self.clients, self.server, self.ledger)
        advance_chain(self.ledger, self.schedule.start - self.ledger.finalized_height)

    def elect(self, t=0):
        self.rnd = self.ledger.view().randomness(self.schedule.start_of(t))
        self.msgs = [m for cl in self.clients if (m := client_elect(cl, t, self.rnd, C, self.params))]
        self.qualified = {self._cid(m.pk) for m in self.msgs}
        return self.msgs

    def _cid(self, pk):
        return next(cl.cid for cl in self.clients if cl.pk == pk)

    def initial(self, t=0):
        tx, sent = server_initial_selection(self.server, t, self.rnd, self.msgs, self.ledger)
        for pk, proof in sent.items():
            self.clients[self._cid(pk)].received_proofs[t] = proof
        advance_chain(self.ledger, TAU)
        return tx, sent

    def disputes(self, t=0):
        view = self.ledger.view()
        out = []
        for cl in self.clients:
            if cl.honest and (d := client_dispute(cl, t, view, self.contract)) is not None:
                assert self.ledger.submit(d)
                out.append(cl.cid)
        advance_chain(self.ledger, TAU)
        return out

    def final(self, t=0):
        tx, sent = server_final_selection(self.server, t, self.ledger)
        for pk, proof in sent.items():
            cl = self.clients[self._cid(pk)]
            if t in cl.received_proofs:
                cl.received_proofs[t] = dataclasses.replace(cl.received_proofs[t], final_txid=tx.txid,
                                                            final_proof=proof)
        advance_chain(self.ledger, 2 * TAU)
        return tx

    def run(self, t=0):
        self.elect(t)
        self.initial(t)
        d = self.disputes(t)
        self.final(t)
        return d

    def verdicts(self, t=0, height=None):
        view = self.ledger.view(height)
        return {cl.cid: pver(view, assemble_proof(cl, t, view), self.contract) for cl in self.clients}


@pytest.mark.parametrize("n", [1, 1000])
def test_register_gives_every_client_a_valid_proof(n):
    keys = [vrf_gen(P, b"reg-%d" % i) for i in range(n)]
    clients = [ClientState(i, kp) for i, kp in enumerate(keys)]
    contract = SelectionContract(P, C, RoundSchedule(2 * TAU + 64, TAU))
    L = Ledger(P, TAU, contract)
    tx = register(clients, ServerState([], SortedMerkleTree.build([]), contract), L)
    assert L.view().registration() == tx
    assert all(verify_proof(tx.root, cl.pk, cl.reg_proof) == Verdict.MEMBER for cl in clients)


def test_register_rejects_duplicate_keys():
    kp = vrf_gen(P, b"dup")
    sched = RoundSchedule(2 * TAU + 64, TAU)
    contract = SelectionContract(P, C, sched)
    with pytest.raises(ProtocolError):
        register([ClientState(0, kp), ClientState(1, kp)], ServerState([], SortedMerkleTree.build([]), contract),
                 Ledger(P, TAU, contract))


def test_client_elect_matches_threshold():
    w = World()
    w.elect()
    for cl in w.clients:
        ev = cl.round_eval[0]
        assert (cl.cid in w.qualified) == (ev.output < w.contract.threshold)
    assert 0 < len(w.qualified) < 30


def test_honest_round_everyone_agrees():
    w = World()
    assert w.run() == []
    v = w.verdicts()
    for cid, verdict in v.items():
        assert verdict == (PVer.SELECTED if cid in w.qualified else PVer.NOT_SELECTED)
    assert w.server.rounds[0].final_rejections == 0
    assert not w.server.rounds[0].p_f.leaves


def test_omitted_client_disputes_and_ends_selected():
    w = World(seed=2)
    w.elect()
    victim = w.msgs[0].pk
    w.server.behavior = ServerBehavior(drop_pks=frozenset({victim}))
    w.initial()
    assert victim not in w.server.rounds[0].p_t
    assert w.disputes() == [w._cid(victim)]
    w.final()
    assert w.verdicts()[w._cid(victim)] == PVer.SELECTED


def test_withheld_proof_triggers_dispute_too():
    w = World(seed=3)
    w.elect()
    victim = w.msgs[-1].pk
    w.server.behavior = ServerBehavior(drop_pks=frozenset({victim}), withhold_only=True)
    w.initial()
    assert victim in w.server.rounds[0].p_t
    assert w.disputes() == [w._cid(victim)]
    w.final()
    assert set(w.verdicts().values()) <= {PVer.SELECTED, PVer.NOT_SELECTED}
    assert w.verdicts()[w._cid(victim)] == PVer.SELECTED


def test_three_disputes_and_omitting_final_is_corrected():
    w = World(n=60, seed=4, behavior=ServerBehavior(omit_disputer_in_final=True))
    w.elect()
    drop = frozenset(m.pk for m in w.msgs[:3])
    w.server.behavior = ServerBehavior(drop_pks=drop, omit_disputer_in_final=True)
    w.initial()
    assert len(w.disputes()) == 3
    tx = w.final()
    rec = w.server.rounds[0]
    assert rec.final_rejections == 1
    assert set(rec.p_f.leaves) == set(drop)
    assert len(tx.inclusion) == 3
    v = w.verdicts()
    assert all(v[w._cid(pk)] == PVer.SELECTED for pk in drop)


def test_unqualified_colluder_in_pool_is_not_selected():
    w = World(seed=5, colluders=tuple(range(30)))
    w.elect()
    unq = next(cl for cl in w.clients if cl.cid not in w.qualified)
    w.server.behavior = ServerBehavior(include_unqualified=frozenset({unq.pk}))
    w.initial()
    rec = w.server.rounds[0]
    assert unq.pk in rec.p_t
    w.disputes()
    w.final()
    forged = SelectionProof(0, unq.pk, rec.issued[unq.pk].evaluation, rec.initial_tx.txid,
                            rec.p_t.prove(unq.pk), rec.final_tx.txid, rec.p_f.prove(unq.pk))
    assert pver(w.ledger.view(), forged, w.contract) == PVer.NOT_SELECTED


def test_server_drops_forged_messages():
    w = World(seed=6)
    w.elect()
    unq = next(cl for cl in w.clients if cl.cid not in w.qualified)
    bogus = QualificationMessage(unq.pk, unq.round_eval[0])
    outsider = vrf_gen(P, b"stranger")
    stranger = QualificationMessage(outsider.pk, vrf_prove(outsider.sk, b"\x00" * 8, P))
    w.msgs = w.msgs + [bogus, stranger]
    w.initial()
    assert set(w.server.rounds[0].p_t.leaves) == {m.pk for m in w.msgs[:-2]}


def _finished(seed=7):
    w = World(seed=seed)
    w.run()
    cl = w.clients[next(iter(w.qualified))]
    return w, cl, assemble_proof(cl, 0, w.ledger.view())


def test_pver_cases():
    w, cl, omega = _finished()
    view, k = w.ledger.view(), w.contract
    assert pver(view, omega, k) == PVer.SELECTED
    assert pver(view, None, k) == PVer.INVALID
    assert pver(view, SelectionProof(0, cl.pk), k) == PVer.INVALID
    # wrong VRF evaluation
    bad_ev = VrfEvaluation(omega.evaluation.output ^ 1, omega.evaluation.proof)
    assert pver(view, dataclasses.replace(omega, evaluation=bad_ev), k) == PVer.INVALID
    # stale or made-up commitment id
    assert pver(view, dataclasses.replace(omega, initial_txid=b"\x00" * 32), k) == PVer.INVALID
    # missing proofs
    assert pver(view, dataclasses.replace(omega, initial_proof=None, final_proof=None), k) == PVer.INVALID
    # view predating the final commitment
    ell = w.schedule.start_of(0)
    assert pver(w.ledger.view(ell + TAU), omega, k) == PVer.INVALID
    # an unqualified client is 0 from its evaluation alone
    other = next(c for c in w.clients if c.cid not in w.qualified)
    assert pver(view, assemble_proof(other, 0, view), k) == PVer.NOT_SELECTED


def test_pver_zero_needs_two_non_membership_proofs():
    w, cl, omega = _finished(seed=8)
    view = w.ledger.view()
    rec = w.server.rounds[0]
    fake = SortedMerkleTree.build(x for x in rec.p_t.leaves if x != cl.pk)
    forged = dataclasses.replace(omega, initial_proof=fake.prove(cl.pk))
    # the final-pool proof is a non-membership proof against the real P_f and
    # the forged one fails against the real P_t: neither 1 nor 0
    assert pver(view, forged, w.contract) == PVer.INVALID


@settings(max_examples=300, deadline=None)
@given(st.data())
def test_pver_total_on_malformed_input(data):
    w, cl, omega = FINISHED
    fields = {}
    for name in ("pk", "initial_txid", "final_txid"):
        if data.draw(st.booleans()):
            fields[name] = data.draw(st.binary(max_size=40))
    if data.draw(st.booleans()):
        fields["initial_proof"] = data.draw(st.sampled_from([None, MerkleProof(omega.initial_proof.kind, ())]))
    if data.draw(st.booleans()):
        fields["round"] = data.draw(st.integers(0, 10))
    if data.draw(st.booleans()):
        fields["evaluation"] = VrfEvaluation(data.draw(st.integers(0, 2**70)), data.draw(st.binary(max_size=20)))
    mutated = dataclasses.replace(omega, **fields)
    assert pver(w.ledger.view(), mutated, w.contract) in set(PVer)
    assert pver(w.ledger.view(), data.draw(st.sampled_from([None, 0, "x", b"", omega.pk])), w.contract) \
        == PVer.INVALID


FINISHED = _finished(seed=9)


def test_selected_pool_counts_only_honest_observers():
    v = [(1, 10, PVer.SELECTED), (2, 11, PVer.SELECTED), (3, 10, PVer.NOT_SELECTED), (4, 10, PVer.INVALID)]
    assert selected_pool(v, honest={10}) == {1}
    assert selected_pool(v, honest={10, 11}) == {1, 2}


def test_views_of_all_final_heights_agree():
    w = World(seed=10, behavior=ServerBehavior(drop_fraction=0.5))
    w.run()
    ell = w.schedule.start_of(0)
    first = w.verdicts(height=ell + 3 * TAU)
    for h in range(ell + 3 * TAU, w.ledger.finalized_height + 1):
        assert w.verdicts(height=h) == first
    assert all(first[cid] == PVer.SELECTED for cid in w.qualified)


def test_baseline_select_is_deterministic_threshold_rule():
    keys = [vrf_gen(P, b"base-%d" % i).pk for i in range(400)]
    pool = baseline_select(0, keys, Fraction(1, 4), P)
    assert pool == baseline_select(0, list(keys), Fraction(1, 4), P)
    assert 60 < len(pool) < 140
    assert baseline_select(1, keys, Fraction(1, 4), P) != pool
    assert baseline_select(0, keys, 1, P) == keys
    with pytest.raises(ProtocolError):
        baseline_select(0, [], C, P)


def test_strict_mode_round(strict_params):
    w = World(n=8, seed=11, params=strict_params)
    w.run()
    v = w.verdicts()
    assert {cid for cid, x in v.items() if x == PVer.SELECTED} == w.qualified


def test_unregistered_key_gets_non_membership_and_forgery_fails():
    w = World(seed=12)
    outsider = vrf_gen(P, b"not-registered")
    tree = w.server.reg_tree
    proof = tree.prove(outsider.pk)
    assert verify_proof(tree.root, outsider.pk, proof) == Verdict.NON_MEMBER
    member_proof = tree.prove(w.clients[0].pk)
    assert verify_proof(tree.root, outsider.pk, member_proof) == Verdict.INVALID


def test_client_elect_c_one_and_determinism():
    w = World(seed=13)
    rnd = w.ledger.view().randomness(w.schedule.start)
    assert all(client_elect(cl, 0, rnd, 1, P) is not None for cl in w.clients)
    a = client_elect(w.clients[0], 0, rnd, C, P)
    b = client_elect(w.clients[0], 0, rnd, C, P)
    assert a == b


def test_message_count_in_binomial_band():
    from fedselect.vrf import SimKeyArray, qualified_mask, sim_outputs
    keys = [vrf_gen(P, b"count-%d" % i) for i in range(10_000)]
    arr = SimKeyArray.from_secret_keys(kp.sk for kp in keys)
    n_q = int(qualified_mask(sim_outputs(arr, b"\x12" * 8), Fraction(1, 100)).sum())
    # 4 sigma around 100
    assert 60 <= n_q <= 140
    # the scalar path agrees on a sample
    rnd = int.from_bytes(b"\x12" * 8, "big")
    sample = [ClientState(i, kp) for i, kp in enumerate(keys[:500])]
    scalar = sum(client_elect(cl, 0, rnd, Fraction(1, 100), P) is not None for cl in sample)
    assert scalar == int(qualified_mask(sim_outputs(arr.take(np.arange(500)), b"\x12" * 8),
                                        Fraction(1, 100)).sum())


def test_unqualified_client_never_disputes_and_empty_final_root():
    from fedselect.merkle import EMPTY_ROOT
    w = World(seed=14, behavior=ServerBehavior(drop_fraction=1.0))
    disputers = w.run()
    assert set(disputers) == w.qualified
    tx = World(seed=15)
    tx.elect()
    tx.initial()
    assert tx.disputes() == []
    final = tx.final()
    assert final.root == EMPTY_ROOT and final.inclusion == ()


def test_baseline_rates_close_to_c():
    keys = [vrf_gen(P, b"rate-%d" % i).pk for i in range(50)]
    root = SortedMerkleTree.build(keys).root
    counts = dict.fromkeys(keys, 0)
    for t in range(1000):
        for pk in baseline_select(t, keys, Fraction(1, 10), P, root=root):
            counts[pk] += 1
    from scipy import stats
    lo, hi = stats.binom.ppf(3.2e-5, 1000, 0.1), stats.binom.isf(3.2e-5, 1000, 0.1)
    assert all(lo <= k <= hi for k in counts.values())
