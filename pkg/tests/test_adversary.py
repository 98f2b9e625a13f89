import math
from fractions import Fraction

import numpy as np
import pytest
from scipy import stats

from fedselect.adversary import (
    AttackError,
    AttackOutcome,
    BaselineGrinding,
    CandidateStream,
    ForcedSelection,
    SecureSelection,
    _root_from_leaves,
    best_of_g_bound,
    colluding_attack,
    grinding_attack_baseline,
    grinding_attack_secure,
    isolation_probability,
    noncolluding_attack,
    omission_attack,
    secure_isolation_rate,
    write_outcomes_csv,
)
from fedselect.fedavg import FLEngine, TaskConfig, cosine, train
from fedselect.merkle import SortedMerkleTree, leaf_hash
from fedselect.simulation import SimulationConfig

TASK = TaskConfig(n_clients=12, d=6, samples=200)


def four_sigma(p, n):
    return 4 * math.sqrt(p * (1 - p) / n)


def test_colluding_attack_recovers_victim_exactly():
    eng = FLEngine(TASK, colluders=[1, 2, 3])
    g = np.full(TASK.d, 0.3)
    out = colluding_attack(ForcedSelection(), 0, [1, 2, 3], eng, g)
    assert out.success and out.pool == [0, 1, 2, 3]
    assert np.allclose(out.recovered, eng.true_update(0, g, 0), atol=1e-12)
    assert out.recovery_linf <= 1e-9 and out.recovery_cosine == pytest.approx(1)
    # the server used one sum and the colluders' own reveals, nothing else
    assert eng.oracle.access_log == [("sum", 0, (0, 1, 2, 3))]
    assert sorted(c for c, _ in eng.reveal_log) == [1, 2, 3]


def test_colluding_attack_argument_checks():
    eng = FLEngine(TASK, colluders=[1])
    with pytest.raises(AttackError):
        colluding_attack(ForcedSelection(), 0, [], eng)
    with pytest.raises(AttackError):
        colluding_attack(ForcedSelection(), 1, [1], eng)


def test_colluding_attack_fails_against_vrf_selection():
    n, col = 200, list(range(1, 11))
    eng = FLEngine(TaskConfig(n_clients=n, d=3, samples=20), colluders=col)
    sel = SecureSelection(n, Fraction(1, 20), seed=1)
    outs = [colluding_attack(sel, 0, col, eng, trial=k) for k in range(200)]
    assert not any(o.success for o in outs)
    assert all(o.recovered is None for o in outs)
    # the pool is never chosen by the server: it is the qualified set
    sizes = [len(o.pool) for o in outs]
    assert 5 < np.mean(sizes) < 15


def test_colluding_attack_succeeds_on_ground_baseline():
    eng = FLEngine(TaskConfig(n_clients=10, d=3, samples=50), colluders=[1, 2, 3, 4, 5])
    sel = BaselineGrinding(10, Fraction(1, 2), key_budget=256, seed=2)
    outs = [colluding_attack(sel, 0, [1, 2, 3, 4, 5], eng, trial=k) for k in range(5)]
    assert all(o.success for o in outs)


def test_noncolluding_attack_sign_and_exactness():
    eng = FLEngine(TASK)
    g = np.full(TASK.d, -0.2)
    out = noncolluding_attack(ForcedSelection(), 0, [1, 2, 3], eng, g, reuse_global=True)
    truth = eng.true_update(0, g, 0)
    assert out.success and np.allclose(out.recovered, truth)
    assert cosine(out.recovered, truth) > 0.999999
    with pytest.raises(AttackError):
        noncolluding_attack(ForcedSelection(), 0, [0, 1], eng, g, True)


def test_noncolluding_attack_with_moving_model_is_approximate():
    eng = FLEngine(TaskConfig(n_clients=12, d=6, samples=200))
    w, _ = train(eng, rounds=100, pool_size=6)
    out = noncolluding_attack(ForcedSelection(), 0, [1, 2, 3, 4, 5], eng, w, reuse_global=False)
    assert out.recovery_linf > 1e-9
    assert out.recovery_cosine > 0.9


def test_noncolluding_attack_needs_exact_pools_under_vrf():
    n = 100
    eng = FLEngine(TaskConfig(n_clients=n, d=3, samples=20))
    sel = SecureSelection(n, Fraction(1, 10), seed=4)
    outs = [noncolluding_attack(sel, 0, [1, 2, 3], eng, np.zeros(3), True, trial=2 * k)
            for k in range(100)]
    assert not any(o.success for o in outs)
    assert not eng.oracle.access_log


@pytest.mark.parametrize("k", [1, 2, 3, 5, 8, 33])
def test_root_from_leaves_matches_tree(k):
    vals = sorted(bytes([i, 7]) for i in range(k))
    assert _root_from_leaves([leaf_hash(v) for v in vals]) == SortedMerkleTree.build(vals).root


def test_baseline_grinding_target_and_boost():
    col = list(range(90, 100))
    out = grinding_attack_baseline(col, 100, "target", 64, Fraction(1, 10), victim=0)
    assert out.success and out.trials["victim_rate"] == 1.0
    assert out.trials["chosen_key"] < 64
    boost = grinding_attack_baseline(col, 100, "boost_colluders", 64, Fraction(1, 10))
    assert boost.trials["colluder_fraction"] > 0.1
    # with one candidate key nothing is chosen
    one = grinding_attack_baseline(col, 100, "boost_colluders", 1, Fraction(1, 10))
    assert one.trials["chosen_key"] == 0
    pools = [set(r["pool"]) for r in out.trials["records"]]
    assert all(0 in p for p in pools)


def test_baseline_grinding_argument_checks():
    with pytest.raises(AttackError):
        grinding_attack_baseline([1], 10, "nope", 4, Fraction(1, 2))
    with pytest.raises(AttackError):
        grinding_attack_baseline([1], 10, "target", 0, Fraction(1, 2))
    with pytest.raises(AttackError):
        grinding_attack_baseline([], 10, "target", 4, Fraction(1, 2))
    with pytest.raises(AttackError):
        grinding_attack_baseline([1], 10, "target", 4, Fraction(1, 2), victim=1)


def test_bounds_closed_forms():
    assert best_of_g_bound(Fraction(1, 10), 1) == pytest.approx(0.1)
    assert best_of_g_bound(Fraction(1, 100), 64) == pytest.approx(1 - 0.99 ** 64)
    for h in (1, 5, 50):
        assert isolation_probability(Fraction(1, 20), h) == pytest.approx(stats.binom.pmf(1, h, 0.05))


def test_candidate_stream_is_deterministic_and_uniform():
    a, b = CandidateStream(64, 3), CandidateStream(64, 3)
    x, y = a.batch(50, 4), b.batch(50, 4)
    assert x.shape == (50, 4, 8) and np.array_equal(x, y)
    big = CandidateStream(64, 5).batch(2000, 8)
    counts = np.bincount(big[..., 0].ravel(), minlength=256)
    assert stats.chisquare(counts).pvalue > 1e-3


def test_secure_grinding_victim_with_one_candidate_is_unbiased():
    out = grinding_attack_secure(1, "victim", Fraction(1, 10), n_honest=5, trials=20_000, seed=1)
    t = out.trials
    assert abs(t["rate"] - 0.1) <= four_sigma(0.1, 20_000)
    assert t["ks_uniform_pvalue"] > 1e-3
    assert not out.success


def test_secure_grinding_victim_stays_within_best_of_g():
    out = grinding_attack_secure(64, "victim", Fraction(1, 100), n_honest=2, trials=4000, seed=2)
    t = out.trials
    assert t["rate"] <= t["bound"] + t["band"] and not out.success
    assert abs(t["rate"] - t["bound"]) <= t["band"]


def test_secure_grinding_isolation_rate_matches_closed_form():
    h, c, n = 20, Fraction(1, 20), 20_000
    out = grinding_attack_secure(1, "isolate", c, n_honest=h, trials=n, seed=3)
    p = float(c) * (1 - float(c)) ** (h - 1)
    assert abs(out.trials["rate"] - p) <= four_sigma(p, n)


def test_secure_isolation_rate_closed_form():
    h, c, n = 20, Fraction(1, 20), 50_000
    p = isolation_probability(c, h)
    assert abs(secure_isolation_rate(h, c, n, seed=4) - p) <= four_sigma(p, n)


def test_secure_grinding_colluder_share_near_beta():
    out = grinding_attack_secure(1, "colluders", Fraction(1, 10), n_honest=80, n_colluders=20,
                                 trials=3000, seed=5)
    assert abs(out.trials["mean_colluder_share"] - 0.2) < 0.03


def test_secure_grinding_argument_checks():
    with pytest.raises(AttackError):
        grinding_attack_secure(65, "victim", Fraction(1, 2), 2)
    with pytest.raises(AttackError):
        grinding_attack_secure(1, "what", Fraction(1, 2), 2)
    with pytest.raises(AttackError):
        grinding_attack_secure(1, "victim", Fraction(1, 2), 2, kappa=128)


def test_outcome_invariant_and_csv():
    with pytest.raises(AttackError):
        AttackOutcome("x", 0, True, recovery_l2=1.0)
    o = AttackOutcome("x", 0, True, [0, 1], np.zeros(2), 0.0, 0.0, 1.0)
    assert o.to_json()["recovered"] == [0.0, 0.0]
    text = write_outcomes_csv([o, AttackOutcome("x", 1, False)])
    lines = text.strip().split("\n")
    assert lines[0].startswith("trial,kind") and len(lines) == 3


def test_omission_attack_by_ids_and_fraction():
    cfg = SimulationConfig(n=40, c=Fraction(1, 4), rounds=3, tau=3, seed=6)
    trace = omission_attack(cfg, drop=1.0)
    for r in trace[1:]:
        assert r["pool"] == r["qualified"] and r["disputes"] == r["qualified"]
    trace = omission_attack(cfg, drop=range(40), omit_disputer_in_final=True)
    assert trace[0]["config"]["behavior"]["drop"] == 40
    for r in trace[1:]:
        assert r["pool"] == r["qualified"]
        assert r["final_rejections"] == (1 if r["disputes"] else 0)


def test_colluding_attack_with_one_colluder_is_exact():
    eng = FLEngine(TASK, colluders=[5])
    g = np.linspace(-1, 1, TASK.d)
    out = colluding_attack(ForcedSelection(), 0, [5], eng, g)
    assert out.success and out.pool == [0, 5]
    assert out.recovery_linf <= 1e-9


def test_secure_grinding_victim_g16_matches_best_of_g():
    out = grinding_attack_secure(16, "victim", Fraction(1, 100), n_honest=2, trials=20_000, seed=6)
    t = out.trials
    assert abs(t["rate"] - best_of_g_bound(Fraction(1, 100), 16)) <= t["band"]
    assert not out.success


def test_secure_grinding_victim_g1_is_uniform():
    out = grinding_attack_secure(1, "victim", Fraction(1, 10), n_honest=2, trials=20_000, seed=7)
    assert out.trials["ks_uniform_pvalue"] > 0.01


def test_isolation_of_large_honest_population_never_observed():
    assert secure_isolation_rate(2000, Fraction(1, 20), 2000, seed=8) == 0.0


def _baseline_trace(out, n):
    head = {"type": "header", "colluders": out.trials["colluders"],
            "config": {"n": n, "beta": out.trials["beta"]}}
    return [head, *({"type": "round", **r} for r in out.trials["records"])]


def test_baseline_boost_without_choice_has_colluder_share_near_beta():
    from fedselect.stats import colluder_excess_test
    n, c, col = 500, Fraction(1, 20), list(range(450, 500))
    out = grinding_attack_baseline(col, n, "boost_colluders", 1, c, rounds=range(200))
    share = out.trials["colluder_fraction"]
    seats = 200 * n * float(c)
    assert abs(share - 0.1) <= 4 * math.sqrt(0.09 / seats)
    assert colluder_excess_test(_baseline_trace(out, n)).passed


def test_baseline_boost_with_key_choice_shows_excess():
    from fedselect.stats import colluder_excess_test
    n, c, col = 500, Fraction(1, 20), list(range(450, 500))
    trace = []
    for k in range(40):
        out = grinding_attack_baseline(col, n, "boost_colluders", 256, c, seed=k, honest_seed=k)
        trace += _baseline_trace(out, n)
    rep = colluder_excess_test(trace)
    assert rep.estimate > 0.1 and not rep.passed
    assert rep.details["p_value"] < 1e-3
