"""Biased-selection attacks and the grinding attacks on both protocols.

Selection control is abstracted as a pool source:

* ``ForcedSelection``: no selection protocol, the server names the pool.
* ``BaselineGrinding``: baseline protocol; colluders grind registration
  keys so the victim and colluders land in the target round's pool.
* ``SecureSelection``: the VRF protocol; the pool is whatever the round's
  randomness qualifies (omitted honest clients dispute back in), and the
  server's only freedom is leaving its own colluders out.

The Monte-Carlo kernels evaluate simulation-mode VRF keys in numpy batches
over candidate randomness values derived from real block headers.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.stats import kstest

from .chain import BlockHeader, Miner
from .encoding import H, truncate_bits, u64
from .fedavg import FLEngine, cosine
from .merkle import EMPTY_ROOT, leaf_hash, node_hash
from .protocol import ServerBehavior, baseline_score
from .simulation import SimulationConfig, SecureSimulation, baseline_round_record, client_keys
from .vrf import SecurityParams, SimKeyArray, as_fraction, qualified_mask, sim_outputs, threshold, vrf_gen

__all__ = [
    "AttackOutcome", "ForcedSelection", "BaselineGrinding", "SecureSelection", "colluding_attack",
    "noncolluding_attack", "grinding_attack_baseline", "grinding_attack_secure", "omission_attack",
    "best_of_g_bound", "isolation_probability", "secure_isolation_rate", "write_outcomes_csv", "AttackError",
]


class AttackError(ValueError):
    pass


@dataclass
class AttackOutcome:
    kind: str
    target: Optional[int]
    success: bool
    pool: list = field(default_factory=list)
    recovered: Optional[np.ndarray] = None
    recovery_l2: Optional[float] = None
    recovery_linf: Optional[float] = None
    recovery_cosine: Optional[float] = None
    trials: dict = field(default_factory=dict)

    def __post_init__(self):
        has = self.recovered is not None
        if any((m is not None) != has for m in (self.recovery_l2, self.recovery_linf, self.recovery_cosine)):
            raise AttackError("recovery metrics must be present iff a vector was recovered")

    def to_json(self) -> dict:
        return {
            "kind": self.kind, "target": self.target, "success": bool(self.success), "pool": list(self.pool),
            "recovered": None if self.recovered is None else self.recovered.tolist(),
            "recovery_l2": self.recovery_l2, "recovery_linf": self.recovery_linf,
            "recovery_cosine": self.recovery_cosine, "trials": self.trials,
        }

    def csv_row(self, trial: int) -> dict:
        return {"trial": trial, "kind": self.kind, "target": self.target, "success": int(bool(self.success)),
                "pool_size": len(self.pool), "recovery_l2": self.recovery_l2,
                "recovery_cosine": self.recovery_cosine}


CSV_FIELDS = ["trial", "kind", "target", "success", "pool_size", "recovery_l2", "recovery_cosine"]


def write_outcomes_csv(outcomes: Sequence[AttackOutcome], fh=None) -> str:
    buf = fh if fh is not None else io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for i, o in enumerate(outcomes):
        w.writerow(o.csv_row(i))
    return buf.getvalue() if fh is None else ""


def _metrics(recovered: np.ndarray, truth: np.ndarray) -> dict:
    diff = recovered - truth
    return {"recovered": recovered, "recovery_l2": float(np.linalg.norm(diff)),
            "recovery_linf": float(np.max(np.abs(diff))), "recovery_cosine": cosine(recovered, truth)}


# -- pool sources ------------------------------------------------------------

class ForcedSelection:
    """No selection protocol: the server picks the pool outright."""

    name = "none"

    def pool(self, victim: int, colluders: Sequence[int], trial: int = 0) -> list[int]:
        return sorted({victim, *colluders})


@dataclass
class SecureSelection:
    """Pool from one VRF round over ``n`` registered simulation keys."""

    n: int
    c: Fraction
    seed: int = 0
    name: str = "secure"

    def __post_init__(self):
        self.c = as_fraction(self.c)
        params = SecurityParams(64, strict=False)
        self._keys = SimKeyArray.from_secret_keys(kp.sk for kp in client_keys(params, self.seed, self.n))

    def pool(self, victim: int, colluders: Sequence[int], trial: int = 0) -> list[int]:
        rnd = truncate_bits(H(b"secure-selection", u64(self.seed), u64(trial)), 64)
        # every qualified honest client ends up in the pool (omission is undone
        # by disputes); unqualified colluders cannot be added, as PVer scores
        # them 0, so the server's best pool is exactly the qualified set
        q = np.flatnonzero(qualified_mask(sim_outputs(self._keys, u64(rnd)), self.c))
        return [int(i) for i in q]


@dataclass
class BaselineGrinding:
    """Baseline protocol with colluders grinding their registration keys."""

    n: int
    c: Fraction
    key_budget: int = 256
    seed: int = 0
    name: str = "baseline"

    def __post_init__(self):
        self.c = as_fraction(self.c)

    def pool(self, victim: int, colluders: Sequence[int], trial: int = 0) -> list[int]:
        out = grinding_attack_baseline(colluders, self.n, "isolate", self.key_budget, self.c,
                                       victim=victim, seed=self.seed * 1000003 + trial)
        return out.pool


# -- biased selection attacks ------------------------------------------------

def colluding_attack(selection, victim: int, colluders: Sequence[int], engine: FLEngine,
                     global_model: Optional[np.ndarray] = None, t: int = 0, trial: int = 0,
                     tol: float = 1e-9) -> AttackOutcome:
    """x_v = S - sum of colluders' updates, if the pool isolates the victim."""
    if not colluders:
        raise AttackError("the colluding attack needs at least one colluder")
    if victim in colluders:
        raise AttackError("victim must not be a colluder")
    g = engine.initial_model() if global_model is None else global_model
    pool = selection.pool(victim, colluders, trial)
    cset = set(colluders)
    honest_in_pool = [i for i in pool if i not in cset]
    meta = {"selection": selection.name, "honest_in_pool": len(honest_in_pool)}
    if honest_in_pool != [victim]:
        return AttackOutcome("colluding", victim, False, pool, trials=meta)
    s = engine.oracle.aggregate(t, pool, g)
    known = [engine.reveal(u, g, t) for u in pool if u in cset]
    recovered = s - np.sum(known, axis=0) if known else s
    m = _metrics(recovered, engine.true_update(victim, g, t))
    return AttackOutcome("colluding", victim, m["recovery_linf"] <= tol, pool, trials=meta, **m)


def noncolluding_attack(selection, victim: int, cohort: Sequence[int], engine: FLEngine,
                        global_model: np.ndarray, reuse_global: bool, t: int = 0,
                        trial: int = 0, tol: float = 1e-9) -> AttackOutcome:
    """Two rounds: pool cohort + v, then cohort alone; x~_v = S^t - S^{t+1}."""
    if victim in cohort:
        raise AttackError("victim must not be in the cohort")
    target = sorted({victim, *cohort})
    meta = {"selection": selection.name, "reuse_global": reuse_global, "round": t}
    if not isinstance(selection, ForcedSelection):
        # both pools must come out exactly as chosen
        p1 = selection.pool(victim, cohort, trial)
        p2 = selection.pool(victim, cohort, trial + 1)
        if p1 != target or p2 != sorted(cohort):
            return AttackOutcome("noncolluding", victim, False, p1, trials=meta)
    s_t = engine.oracle.aggregate(t, target, global_model)
    g_next = global_model if reuse_global else s_t / len(target)
    s_next = engine.oracle.aggregate(t + 1, cohort, g_next)
    recovered = s_t - s_next
    m = _metrics(recovered, engine.true_update(victim, global_model, t))
    ok = m["recovery_linf"] <= tol if reuse_global else True
    return AttackOutcome("noncolluding", victim, ok, target, trials=meta, **m)


# -- grinding on the baseline ------------------------------------------------

def _root_from_leaves(hashes: list[bytes]) -> bytes:
    level = hashes
    if not level:
        return EMPTY_ROOT
    while len(level) > 1:
        nxt = [node_hash(level[i], level[i + 1]) for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


BASELINE_OBJECTIVES = ("boost_colluders", "target", "isolate")


def grinding_attack_baseline(colluders: Sequence[int], n: int, objective: str, key_budget: int, c,
                             victim: Optional[int] = None, rounds: Sequence[int] = (0,),
                             seed: int = 0, params: Optional[SecurityParams] = None,
                             honest_seed: int = 0) -> AttackOutcome:
    """Colluders register last, choosing keys that optimise ``objective``.

    Every colluder key enters ``MRoot(U)`` and so reshuffles the whole pool;
    the searched registries are the ``key_budget`` alternatives of the last
    colluder to register (the others fixed), scored exhaustively.
    Objectives: ``boost_colluders`` (colluders selected over ``rounds``),
    ``target`` (victim selected, then colluders), ``isolate`` (victim the
    only honest client selected, then colluders).
    """
    if key_budget < 1:
        raise AttackError("key budget must be >= 1")
    if objective not in BASELINE_OBJECTIVES:
        raise AttackError(f"unknown objective {objective!r}")
    if not colluders:
        raise AttackError("grinding needs colluders")
    params = params or SecurityParams(64, strict=False)
    c = as_fraction(c)
    thr = threshold(c, params.kappa)
    cset = sorted(set(colluders))
    honest = [i for i in range(n) if i not in set(cset)]
    if victim is None:
        victim = honest[0]
    if victim in cset:
        raise AttackError("victim must be honest")
    honest_keys = {i: kp.pk for i, kp in zip(range(n), client_keys(params, honest_seed, n)) if i not in set(cset)}

    def colluder_pk(i: int, k: int) -> bytes:
        return vrf_gen(params, b"colluder" + u64(seed) + u64(i) + u64(k)).pk

    fixed = {i: colluder_pk(i, 0) for i in cset[:-1]}
    last = cset[-1]
    leaf_cache = {pk: leaf_hash(pk) for pk in [*honest_keys.values(), *fixed.values()]}
    base = sorted([*honest_keys.values(), *fixed.values()])
    vpk = honest_keys[victim]
    others = [pk for i, pk in honest_keys.items() if i != victim]

    def score(pk_last: bytes) -> tuple:
        reg = sorted([*base, pk_last])
        root = _root_from_leaves([leaf_cache.get(pk) or leaf_hash(pk) for pk in reg])
        col = [*fixed.values(), pk_last]
        n_col = sum(baseline_score(t, root, pk, params.kappa) < thr for t in rounds for pk in col)
        if objective == "boost_colluders":
            return (n_col,), root
        v_sel = all(baseline_score(t, root, vpk, params.kappa) < thr for t in rounds)
        if objective == "target" or not v_sel:
            return (int(v_sel), n_col), root
        alone = not any(baseline_score(t, root, pk, params.kappa) < thr for t in rounds for pk in others)
        return (int(v_sel) + int(alone), n_col), root

    best = None
    for k in range(key_budget):
        pk = colluder_pk(last, k)
        s, root = score(pk)
        if best is None or s > best[0]:
            best = (s, k, pk, root)
    _, k_best, pk_best, root = best
    keys = {**honest_keys, **fixed, last: pk_best}
    registry = [keys[i] for i in range(n)]
    cid_of = {pk: i for i, pk in enumerate(registry)}
    records = [baseline_round_record(t, registry, root, cid_of, c, params) for t in rounds]
    pools = [r["pool"] for r in records]
    sel = [set(p) for p in pools]
    n_sel = sum(len(p) for p in sel)
    n_col = sum(len(p & set(cset)) for p in sel)
    v_rate = sum(victim in p for p in sel) / len(sel)
    honest_others = [len(p - set(cset) - {victim}) for p in sel]
    success = {
        "boost_colluders": n_sel > 0 and n_col / n_sel > len(cset) / n,
        "target": v_rate == 1.0,
        "isolate": v_rate == 1.0 and max(honest_others) == 0,
    }[objective]
    return AttackOutcome(
        "grind-baseline", victim, bool(success), pools[0],
        trials={"objective": objective, "key_budget": key_budget, "chosen_key": k_best,
                "rounds": list(rounds), "colluder_fraction": (n_col / n_sel) if n_sel else None,
                "victim_rate": v_rate, "beta": len(cset) / n, "records": records,
                "colluders": cset, "registry_root": root.hex()})


# -- grinding on the secure protocol ----------------------------------------

def best_of_g_bound(c, g: int) -> float:
    """Chance that at least one of g independent candidates qualifies the victim."""
    return 1.0 - (1.0 - float(as_fraction(c))) ** g


def isolation_probability(c, h: int) -> float:
    """Pr[exactly one of h honest clients qualifies] = h c (1-c)^(h-1)."""
    c = float(as_fraction(c))
    return h * c * (1 - c) ** (h - 1)


class CandidateStream:
    """Per-trial randomness candidates built from block headers.

    Each trial extends a fixed honest prefix of ``kappa - 2`` headers with a
    fresh honest header and then ``g`` adversarial candidates for the
    window-closing header, exactly as ``prospective_randomness`` would hash
    them. Only the closing header's entropy differs between candidates, so
    their encodings share everything but the final field.
    """

    def __init__(self, kappa: int, seed: int):
        self.kappa = kappa
        self.rng = np.random.default_rng([seed, 11])
        self.ell = 2 * kappa
        parent = b"\x00" * 32
        self.prefix = hashlib.sha256()
        for h in range(self.ell - kappa, self.ell - 2):
            hd = BlockHeader(h, parent, EMPTY_ROOT, Miner.HONEST, int(self.rng.integers(2**63)), kappa)
            self.prefix.update(hd.encode())
            parent = hd.digest
        self.parent = parent

    def next_trial(self, g: int) -> np.ndarray:
        """Candidate VRF inputs for one trial, uint8 array of shape (g, kappa/8)."""
        kappa = self.kappa
        hon = BlockHeader(self.ell - 2, self.parent, EMPTY_ROOT, Miner.HONEST,
                          int.from_bytes(self.rng.bytes(kappa // 8), "big"), kappa)
        base = self.prefix.copy()
        base.update(hon.encode())
        closing = BlockHeader(self.ell - 1, hon.digest, EMPTY_ROOT, Miner.ADVERSARIAL, 0, kappa)
        common = closing.encode()[:-kappa // 8]
        ents = self.rng.bytes(g * kappa // 8)
        out = bytearray()
        for j in range(g):
            h = base.copy()
            h.update(common + ents[j * kappa // 8:(j + 1) * kappa // 8])
            out += h.digest()[:kappa // 8]
        return np.frombuffer(bytes(out), dtype=np.uint8).reshape(g, kappa // 8)

    def batch(self, trials: int, g: int) -> np.ndarray:
        return np.stack([self.next_trial(g) for _ in range(trials)])


SECURE_OBJECTIVES = ("victim", "isolate", "colluders")


def grinding_attack_secure(g: int, objective: str, c, n_honest: int, n_colluders: int = 0,
                           trials: int = 1000, seed: int = 0, kappa: int = 64,
                           chunk: int = 2000) -> AttackOutcome:
    """Best-of-g randomness grinding against the VRF protocol (batched).

    ``victim``: success when some candidate qualifies the victim; compared
    with ``best_of_g_bound``. ``isolate``: success when some candidate leaves
    the victim as the only qualified honest client (pool = victim +
    colluders). ``colluders``: the candidate with most qualified colluders
    is chosen and the colluder share of the pool recorded.
    """
    if objective not in SECURE_OBJECTIVES:
        raise AttackError(f"unknown objective {objective!r}")
    if not 1 <= g <= kappa:
        raise AttackError("need 1 <= g <= kappa")
    if kappa != 64:
        raise AttackError("batched kernels run simulation keys with kappa = 64")
    c = as_fraction(c)
    params = SecurityParams(kappa, strict=False)
    keys = SimKeyArray.from_secret_keys(kp.sk for kp in client_keys(params, seed, n_honest + n_colluders))
    honest = keys.take(np.arange(n_honest))
    victim = keys.take(np.arange(1))
    others = keys.take(np.arange(1, n_honest))
    colluders = keys.take(np.arange(n_honest, n_honest + n_colluders))
    stream = CandidateStream(kappa, seed)
    per_trial = np.zeros(trials, dtype=bool)
    shares = []
    chosen_u: list = []
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        inputs = stream.batch(m, g)                                   # (m, g, 8)
        vout = sim_outputs(victim, inputs)[..., 0]                   # (m, g)
        vq = qualified_mask(vout, c)
        if objective == "victim":
            # the server keeps the candidate with the smallest victim output
            chosen_u.append(vout.min(axis=1).astype(np.float64) / 2.0**64)
            per_trial[done:done + m] = vq.any(axis=1)
        elif objective == "isolate":
            alive = np.argwhere(vq)                                   # (k, 2) candidate ids
            step = 64
            for s in range(0, len(others), step):
                if len(alive) == 0:
                    break
                sub = others.take(np.arange(s, min(s + step, len(others))))
                out = sim_outputs(sub, inputs[alive[:, 0], alive[:, 1]])
                alive = alive[~qualified_mask(out, c).any(axis=1)]
            per_trial[done + np.unique(alive[:, 0])] = True
        else:
            cq = qualified_mask(sim_outputs(colluders, inputs), c).sum(axis=2)   # (m, g)
            pick = cq.argmax(axis=1)
            chosen = inputs[np.arange(m), pick]
            hq = qualified_mask(sim_outputs(honest, chosen), c).sum(axis=1)
            col = cq[np.arange(m), pick]
            tot = hq + col
            shares.extend((col[tot > 0] / tot[tot > 0]).tolist())
            per_trial[done:done + m] = col > 0
        done += m
    rate = float(per_trial.mean())
    meta = {"objective": objective, "g": g, "c": str(c), "n_honest": n_honest,
            "n_colluders": n_colluders, "trials": trials, "successes": int(per_trial.sum()), "rate": rate}
    if objective == "victim":
        bound = best_of_g_bound(c, g)
        band = 4 * math.sqrt(bound * (1 - bound) / trials)
        u = np.concatenate(chosen_u)
        meta.update(bound=bound, band=band, ks_uniform_pvalue=float(kstest(u, "uniform").pvalue))
        success = rate > bound + band
    elif objective == "isolate":
        success = bool(per_trial.any())
    else:
        meta["mean_colluder_share"] = float(np.mean(shares)) if shares else None
        meta["beta"] = n_colluders / (n_honest + n_colluders) if n_honest + n_colluders else None
        success = False
    return AttackOutcome("grind-secure", 0, bool(success), trials=meta)


def secure_isolation_rate(h: int, c, trials: int, seed: int = 0) -> float:
    """Fraction of honest-randomness rounds whose pool has exactly one honest client."""
    params = SecurityParams(64, strict=False)
    keys = SimKeyArray.from_secret_keys(kp.sk for kp in client_keys(params, seed, h))
    stream = CandidateStream(64, seed)
    count = 0
    done = 0
    while done < trials:
        m = min(5000, trials - done)
        inputs = stream.batch(m, 1)[:, 0]
        q = qualified_mask(sim_outputs(keys, inputs), c).sum(axis=1)
        count += int((q == 1).sum())
        done += m
    return count / trials


# -- omission ----------------------------------------------------------------

def omission_attack(cfg: SimulationConfig, drop: Iterable[int] | float = (), withhold_only: bool = False,
                    omit_disputer_in_final: bool = False) -> list[dict]:
    """Run the secure protocol with a server that withholds proofs.

    ``drop`` is a set of client ids or a fraction of qualified clients.
    Returns the trace (header first).
    """
    if isinstance(drop, float):
        behavior = ServerBehavior(drop_fraction=drop, withhold_only=withhold_only,
                                  omit_disputer_in_final=omit_disputer_in_final)
        sim = SecureSimulation(_with_behavior(cfg, behavior))
    else:
        sim = SecureSimulation(cfg)
        pks = frozenset(sim.clients[i].pk for i in drop)
        sim.server.behavior = ServerBehavior(drop_pks=pks, withhold_only=withhold_only,
                                             omit_disputer_in_final=omit_disputer_in_final)
        sim.cfg = _with_behavior(cfg, sim.server.behavior)
    return list(sim.run())


def _with_behavior(cfg: SimulationConfig, behavior: ServerBehavior) -> SimulationConfig:
    return replace(cfg, behavior=behavior)
