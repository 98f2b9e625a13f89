import hashlib
import random
from fractions import Fraction

import numpy as np
import pytest
from scipy import stats

from fedselect.chain import (
    AdversaryModel,
    ChainError,
    Dispute,
    FinalSelection,
    InitialSelection,
    Ledger,
    Miner,
    Registration,
    RoundSchedule,
    SelectionContract,
    advance_chain,
    prospective_randomness,
    randomness_from_headers,
    rnd_bytes,
)
from fedselect.merkle import SortedMerkleTree
from fedselect.vrf import SecurityParams, vrf_gen, vrf_prove

P = SecurityParams(kappa=64, strict=False)
TAU = 4


def fresh(seed=0, contract=None):
    return Ledger(P, TAU, contract, seed=seed)


def test_genesis_and_finality_arithmetic():
    L = fresh()
    assert L.tip_height == TAU - 1 and L.finalized_height == 0
    advance_chain(L, 10)
    assert L.finalized_height == L.tip_height - TAU + 1
    with pytest.raises(ChainError):
        L.view(L.finalized_height + 1)


def test_submitted_tx_is_final_after_exactly_tau_blocks():
    L = fresh()
    advance_chain(L, 5)
    h = L.finalized_height
    tx = Registration(b"\x11" * 32)
    assert L.submit(tx)
    advance_chain(L, TAU - 1)
    assert L.view().registration() is None
    advance_chain(L, 1)
    assert L.finalized_height == h + TAU
    assert L.view().registration() == tx
    assert L.view(h + TAU - 1).registration() is None


def test_persistence_of_finalized_prefix():
    L = fresh(seed=3)
    advance_chain(L, 100, AdversaryModel(1, 0.4), rng=random.Random(1))
    F = L.finalized_height
    snap = [L.block(h).header.digest for h in range(F + 1)]
    advance_chain(L, 300, AdversaryModel(1, 0.4), rng=random.Random(2))
    assert [L.block(h).header.digest for h in range(F + 1)] == snap
    for h in range(1, L.tip_height + 1):
        assert L.block(h).header.parent == L.block(h - 1).header.digest


def test_chain_quality_under_heavy_adversarial_mining():
    L = fresh(seed=1)
    advance_chain(L, 3000, AdversaryModel(1, 0.995), rng=random.Random(0))
    run = longest = 0
    for h in range(L.tip_height + 1):
        run = run + 1 if L.block(h).header.miner == Miner.ADVERSARIAL else 0
        longest = max(longest, run)
    assert 0 < longest < P.kappa
    # every kappa-window therefore contains an honest block
    assert L.adversarial_window_ok()


def test_forcing_a_full_adversarial_window_is_refused():
    L = fresh()
    start = L.tip_height + 1
    with pytest.raises(ChainError):
        advance_chain(L, P.kappa, forced_adversarial=range(start, start + P.kappa))


@pytest.mark.parametrize("bad", [AdversaryModel(65, 0.1), AdversaryModel(1, 1.0), AdversaryModel(-1, 0)])
def test_adversary_model_validation(bad):
    with pytest.raises(ChainError):
        advance_chain(fresh(), 1, bad)


def test_randomness_matches_hash_of_headers():
    L = fresh(seed=5)
    advance_chain(L, 200)
    start = 150
    h = hashlib.sha256()
    for k in range(start - P.kappa, start):
        h.update(L.block(k).header.encode())
    expect = int.from_bytes(h.digest()[:8], "big")
    assert L.view().randomness(start) == expect
    assert randomness_from_headers([L.block(k).header for k in range(start - 64, start)], 64) == expect


def test_randomness_deterministic_and_sensitive():
    a, b, c = fresh(seed=9), fresh(seed=9), fresh(seed=10)
    for L in (a, b, c):
        advance_chain(L, 150)
    assert a.view().randomness(120) == b.view().randomness(120)
    assert a.view().randomness(120) != c.view().randomness(120)
    # a different closing block changes the value
    closing = a.block(119).header
    import dataclasses
    other = dataclasses.replace(closing, entropy=closing.entropy ^ 1)
    assert prospective_randomness(a, closing) == a.view().randomness(120)
    assert prospective_randomness(a, other) != a.view().randomness(120)


def test_randomness_needs_kappa_final_blocks():
    L = fresh()
    advance_chain(L, 40)
    with pytest.raises(ChainError):
        L.view().randomness(P.kappa - 1)
    with pytest.raises(ChainError):
        L.view().randomness(L.finalized_height + 5)


def test_randomness_uniform_over_a_thousand_rounds():
    L = fresh(seed=11)
    advance_chain(L, P.kappa + 1000 * 2 + TAU)
    vals = [L.view().randomness(P.kappa + 2 * k) for k in range(1000)]
    assert len(set(vals)) == 1000
    counts = np.bincount([v >> 60 for v in vals], minlength=16)
    assert stats.chisquare(counts).pvalue > 0.01


def _round_randomness(seed, adversary=None, selector=None, rounds=400):
    L = fresh(seed=seed)
    advance_chain(L, P.kappa + 2 * rounds + TAU, adversary, candidate_selector=selector,
                  rng=random.Random(seed))
    return np.array([L.view().randomness(P.kappa + 2 * k) for k in range(rounds)], dtype=float) / 2.0 ** 64


def test_ungrinded_adversary_cannot_bias():
    """With g = 1 a selector has one candidate, so rnd matches the honest chain."""
    seen = []

    def selector(ledger, candidates):
        seen.append(len(candidates))
        # prefer small randomness if there were a choice
        vals = [prospective_randomness(ledger, c) for c in candidates] if ledger.tip_height >= P.kappa else [0]
        return int(np.argmin(vals))

    adv = _round_randomness(4, AdversaryModel(1, 0.9), selector)
    honest = _round_randomness(5)
    assert set(seen) == {1}
    assert stats.ks_2samp(adv, honest).pvalue > 0.01
    assert stats.kstest(adv, "uniform").pvalue > 0.01


@pytest.mark.parametrize("g", [1, 4, 64])
def test_grind_log_respects_budget(g):
    L = fresh(seed=g)
    advance_chain(L, 200, AdversaryModel(g, 0.5),
                  candidate_selector=lambda led, cands: len(cands) - 1, rng=random.Random(g))
    assert L.grind_log and all(n <= g for _, n, _ in L.grind_log)


def test_selector_out_of_range_rejected():
    L = fresh()
    with pytest.raises(ChainError):
        advance_chain(L, 5, AdversaryModel(2, 0.0), candidate_selector=lambda led, c: 7,
                      forced_adversarial=[L.tip_height + 1])


def test_pending_order_does_not_change_header():
    txs = [Registration(bytes([i]) * 32) for i in range(1)]
    txs += [FinalSelection(0, b"\x00" * 32)]
    a, b = fresh(seed=1), fresh(seed=1)
    a.pending = [(tx, 0) for tx in txs]
    b.pending = [(tx, 0) for tx in reversed(txs)]
    advance_chain(a, 1)
    advance_chain(b, 1)
    assert a.block(a.tip_height).header == b.block(b.tip_height).header


# -- contract rules ------------------------------------------------------------

@pytest.fixture(scope="module")
def world():
    keys = [vrf_gen(P, b"chain-%d" % i) for i in range(12)]
    outsider = vrf_gen(P, b"outsider")
    tree = SortedMerkleTree.build(kp.pk for kp in keys)
    sched = RoundSchedule(2 * TAU + P.kappa, TAU)
    contract = SelectionContract(P, Fraction(1, 2), sched)
    return keys, outsider, tree, contract


def _ledger_at_round_start(world, seed=0):
    keys, outsider, tree, contract = world
    L = Ledger(P, TAU, contract, seed=seed)
    assert L.submit(Registration(tree.root))
    assert not L.submit(Registration(b"\x01" * 32))
    advance_chain(L, contract.schedule.start - L.finalized_height)
    assert not L.submit(Registration(b"\x02" * 32))
    ell = contract.schedule.start_of(0)
    rnd = L.view().randomness(ell)
    evs = [vrf_prove(kp.sk, rnd_bytes(rnd, P), P) for kp in keys]
    return L, evs


def _dispute(kp, ev, tree):
    return Dispute(0, kp.pk, ev, tree.prove(kp.pk), P.kappa)


def test_dispute_rules(world):
    keys, outsider, tree, contract = world
    L, evs = _ledger_at_round_start(world)
    qual = [i for i, e in enumerate(evs) if e.output < contract.threshold]
    unq = [i for i, e in enumerate(evs) if e.output >= contract.threshold]
    assert qual and unq
    assert L.submit(InitialSelection(0, SortedMerkleTree.build([]).root))
    assert not L.submit(InitialSelection(0, b"\x05" * 32))
    # unqualified and unregistered disputes are refused
    assert not L.submit(_dispute(keys[unq[0]], evs[unq[0]], tree))
    rnd = L.view().randomness(contract.schedule.start)
    ev_out = vrf_prove(outsider.sk, rnd_bytes(rnd, P), P)
    assert not L.submit(Dispute(0, outsider.pk, ev_out, tree.prove(outsider.pk), P.kappa))
    # an evaluation under the wrong randomness fails VRF verification
    wrong = vrf_prove(keys[qual[0]].sk, rnd_bytes(rnd ^ 1, P), P)
    assert not L.submit(_dispute(keys[qual[0]], wrong, tree))
    a, b = qual[0], qual[1] if len(qual) > 1 else qual[0]
    assert L.submit(_dispute(keys[a], evs[a], tree))
    assert not L.submit(_dispute(keys[a], evs[a], tree))
    # final selection is not accepted before l + 2 tau
    early = SortedMerkleTree.build([keys[a].pk])
    assert not L.submit(FinalSelection(0, early.root, (early.prove(keys[a].pk),)))
    advance_chain(L, 2 * TAU)
    assert L.view().disputes(0)[0].pk == keys[a].pk
    # late dispute refused
    if b != a:
        assert not L.submit(_dispute(keys[b], evs[b], tree))
    omitting = SortedMerkleTree.build([keys[unq[0]].pk])
    assert not L.submit(FinalSelection(0, omitting.root, (omitting.prove(keys[a].pk),)))
    assert not L.submit(FinalSelection(0, omitting.root, ()))
    ok = SortedMerkleTree.build([keys[a].pk])
    assert L.submit(FinalSelection(0, ok.root, (ok.prove(keys[a].pk),)))
    assert not L.submit(FinalSelection(0, ok.root, (ok.prove(keys[a].pk),)))


def test_initial_selection_window(world):
    L, _ = _ledger_at_round_start(world, seed=1)
    _, _, _, contract = world
    advance_chain(L, TAU + 1)
    assert not L.submit(InitialSelection(0, b"\x00" * 32))
    assert not L.submit(InitialSelection(0, b"short"))


def test_no_contract_rejects_round_transactions():
    L = fresh()
    assert not L.submit(InitialSelection(0, b"\x00" * 32))
    assert L.rejected


def test_pruning_bounds_memory():
    L = fresh()
    advance_chain(L, 500)
    L.prune_before(400)
    assert L.base_height == 400
    with pytest.raises(ChainError):
        L.block(10)
    advance_chain(L, 10)
    assert L.block(L.tip_height).header.parent == L.block(L.tip_height - 1).header.digest
