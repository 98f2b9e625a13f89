"""Round scheduler for the secure and baseline protocols.

A single logical scheduler advances the ledger in steps of ``tau`` blocks
and runs every party's action at its checkpoint. Rounds start every
``2*tau`` finalized blocks and overlap: round ``t`` is evaluated by its
observers at ``l_t + 4*tau``. The final commitment is final from
``l_t + 3*tau``, and observers hold views anywhere in
``[l_t + 3*tau, l_t + 4*tau]``.

Each finished round yields a plain-dict trace record (JSON ready, no
timestamps) so the same record feeds statistics, attacks and costs.
"""

from __future__ import annotations

import dataclasses
import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, Optional, Sequence

import numpy as np

from . import SCHEMA_VERSION
from .chain import (
    AdversaryModel,
    BaselineRegistration,
    BaselineSelection,
    Ledger,
    RoundSchedule,
    SelectionContract,
    advance_chain,
    prospective_randomness_many,
    rnd_bytes,
)
from .encoding import HASH_NAME, u64
from .merkle import SortedMerkleTree
from .protocol import (
    PVer,
    ClientState,
    QualificationMessage,
    SelectionProof,
    ServerBehavior,
    ServerState,
    assemble_proof,
    baseline_select,
    client_dispute,
    pver,
    register,
    server_final_selection,
    server_initial_selection,
)
from .vrf import (
    SecurityParams,
    SimKeyArray,
    VrfEvaluation,
    as_fraction,
    qualified_mask,
    remember_sim_output,
    sim_outputs,
    threshold,
    vrf_gen,
    vrf_prove,
)

OBJECTIVES = ("victim", "colluders", "honest_ratio", "isolate")
EAGER_REG_PROOFS = 20000


@dataclass
class SimulationConfig:
    n: int = 100
    c: Fraction = Fraction(1, 10)
    kappa: int = 64
    strict: bool = False
    rsa_bits: int = 2048
    tau: Optional[int] = None
    rounds: int = 10
    seed: int = 0
    beta: float = 0.0
    grind_budget: int = 1
    miner_fraction: float = 0.0
    grind_objective: Optional[str] = None
    behavior: ServerBehavior = field(default_factory=ServerBehavior)
    n_observers: int = 2
    victim: Optional[int] = None
    shuffle_clients: bool = False
    prune: bool = True

    def __post_init__(self):
        self.c = as_fraction(self.c)
        if self.n < 1:
            raise ValueError("need at least one client")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.grind_objective is not None and self.grind_objective not in OBJECTIVES:
            raise ValueError(f"unknown grinding objective {self.grind_objective!r}")
        if self.n_observers < 1:
            raise ValueError("need at least one observer")
        if self.tau is not None and self.tau < 1:
            raise ValueError("tau must be >= 1")
        AdversaryModel(self.grind_budget, self.miner_fraction).validate(self.kappa)

    @property
    def params(self) -> SecurityParams:
        return SecurityParams(self.kappa, self.strict, self.rsa_bits)

    @property
    def finality(self) -> int:
        return self.tau if self.tau is not None else self.kappa

    @property
    def n_colluders(self) -> int:
        n_c = int(round(self.beta * self.n))
        return min(n_c, self.n - 1)

    def summary(self) -> dict:
        b = self.behavior
        return {
            "n": self.n, "c": f"{self.c.numerator}/{self.c.denominator}", "kappa": self.kappa,
            "strict": self.strict, "tau": self.finality, "rounds": self.rounds, "seed": self.seed,
            "beta": self.beta, "grind_budget": self.grind_budget, "miner_fraction": self.miner_fraction,
            "grind_objective": self.grind_objective, "n_observers": self.n_observers,
            "behavior": {"drop_fraction": b.drop_fraction, "withhold_only": b.withhold_only,
                         "omit_disputer_in_final": b.omit_disputer_in_final,
                         "include_unqualified": len(b.include_unqualified), "equivocate": b.equivocate,
                         "drop": len(b.drop_pks)},
        }


def _stream(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


def _pystream(seed: int, tag: int) -> random.Random:
    return random.Random(int(np.random.SeedSequence([seed, tag]).generate_state(2, np.uint64)[0]))


def client_keys(params: SecurityParams, seed: int, n: int):
    return [vrf_gen(params, b"client" + u64(seed) + u64(i)) for i in range(n)]


def choose_roles(n: int, n_colluders: int, seed: int, victim: Optional[int] = None
                 ) -> tuple[list[int], int]:
    """Colluder ids (sorted) and the victim, an honest client."""
    rng = _stream(seed, 1)
    pool = [i for i in range(n) if i != victim] if victim is not None else list(range(n))
    colluders = sorted(int(x) for x in rng.choice(pool, size=n_colluders, replace=False)) \
        if n_colluders else []
    if victim is None:
        cset = set(colluders)
        victim = next(i for i in range(n) if i not in cset)
    return colluders, victim


class KeyOracle:
    """VRF outputs of all registered keys on a given input.

    Simulation-mode keys with kappa = 64 are evaluated in one numpy call;
    otherwise evaluations are computed key by key and cached per input.
    """

    def __init__(self, sks: Sequence[bytes], params: SecurityParams):
        self.sks = list(sks)
        self.params = params
        self.batch = not params.strict and params.kappa == 64
        self.keys = SimKeyArray.from_secret_keys(self.sks) if self.batch else None
        self._last: tuple = (None, None, {})

    def outputs(self, data: bytes) -> np.ndarray:
        if self._last[0] == data:
            return self._last[1]
        if self.batch:
            out = sim_outputs(self.keys, data)
            evals = {}
        else:
            evals = {i: vrf_prove(sk, data, self.params) for i, sk in enumerate(self.sks)}
            out = np.array([evals[i].output for i in range(len(self.sks))], dtype=object)
        self._last = (data, out, evals)
        return out

    def evaluation(self, i: int, data: bytes) -> VrfEvaluation:
        out = self.outputs(data)
        if self.batch:
            # identical to vrf_prove for simulation keys (the proof is the key)
            key, output = self.sks[i][1:], int(out[i])
            remember_sim_output(key, data, 64, output)
            return VrfEvaluation(output, key)
        return self._last[2][i]

    def outputs_many(self, inputs: Sequence[bytes], idx: np.ndarray) -> np.ndarray:
        """Outputs of keys ``idx`` on each input, shape ``(len(inputs), len(idx))``."""
        if self.batch:
            arr = np.frombuffer(b"".join(inputs), dtype=np.uint8).reshape(len(inputs), -1)
            return sim_outputs(self.keys.take(idx), arr)
        return np.array([[vrf_prove(self.sks[i], d, self.params).output for i in idx] for d in inputs],
                        dtype=object)


def _mask(outputs: np.ndarray, c, params: SecurityParams) -> np.ndarray:
    if outputs.dtype == np.uint64:
        return qualified_mask(outputs, c, params.kappa)
    thr = threshold(c, params.kappa)
    return np.array([int(x) < thr for x in outputs.ravel()], dtype=bool).reshape(outputs.shape)


def _tx_record(tx, ledger: Ledger, cid_of: dict) -> dict:
    payer = tx.payer
    if payer.startswith("client:"):
        payer = f"client:{cid_of[bytes.fromhex(payer[7:])]}"
    return {"kind": tx.kind.value, "bytes": tx.size, "payer": payer,
            "ops": dict(sorted(ledger.ops.get(tx.txid, {}).items()))}


def _verdict(v: PVer):
    return v.value


class SecureSimulation:
    def __init__(self, cfg: SimulationConfig):
        self.cfg = cfg
        p = self.params = cfg.params
        tau = cfg.finality
        self.tau = tau
        keys = client_keys(p, cfg.seed, cfg.n)
        self.colluders, self.victim = choose_roles(cfg.n, cfg.n_colluders, cfg.seed, cfg.victim)
        cset = set(self.colluders)
        self.honest = np.array([i not in cset for i in range(cfg.n)])
        self.clients = [ClientState(i, kp, honest=i not in cset) for i, kp in enumerate(keys)]
        self.cid_of = {kp.pk: i for i, kp in enumerate(keys)}
        self.oracle = KeyOracle([kp.sk for kp in keys], p)
        # the randomness window of round 0 starts after the registry is final
        self.schedule = RoundSchedule(2 * tau + p.kappa, tau)
        self.contract = SelectionContract(p, cfg.c, self.schedule)
        self.ledger = Ledger(p, tau, self.contract, seed=int(_stream(cfg.seed, 2).integers(2**63)))
        behavior = cfg.behavior
        self.server = ServerState([], SortedMerkleTree.build([]), self.contract, behavior,
                                  colluder_secrets={keys[i].pk: keys[i].sk for i in self.colluders},
                                  rng=_stream(cfg.seed, 3))
        self.adv_rng = _pystream(cfg.seed, 4)
        self.obs_rng = _stream(cfg.seed, 5)
        self.order_rng = _stream(cfg.seed, 6)
        self.adversary = AdversaryModel(cfg.grind_budget, cfg.miner_fraction)
        self.registration = register(self.clients, self.server, self.ledger,
                                     eager=cfg.n <= EAGER_REG_PROOFS)
        self.live: dict[int, dict] = {}
        self.grind_meta: dict[int, list] = {}
        self.action_log: list[tuple[str, int, int]] = []
        self._forced = set()
        if cfg.grind_objective is not None and cfg.grind_budget >= 1:
            self._forced = {self.schedule.start_of(t) - 1 for t in range(cfg.rounds)}
        colluder_idx = np.array(self.colluders, dtype=np.int64)
        honest_idx = np.flatnonzero(self.honest)
        self._objective_keys = {
            "victim": np.array([self.victim]),
            "colluders": colluder_idx,
            "honest_ratio": np.arange(cfg.n),
            "isolate": honest_idx,
        }

    # -- chain ---------------------------------------------------------------

    def _score(self, outputs: np.ndarray) -> np.ndarray:
        """Adversary's score per candidate; higher is better."""
        cfg, p = self.cfg, self.params
        q = _mask(outputs, cfg.c, p)
        obj = cfg.grind_objective
        if obj == "victim":
            return q[:, 0].astype(float)
        if obj == "colluders":
            return q.sum(axis=1).astype(float)
        if obj == "honest_ratio":
            h = q[:, self.honest].sum(axis=1)
            tot = q.sum(axis=1)
            return np.where(tot > 0, -h / np.maximum(tot, 1), -1.0)
        # isolate: victim qualified is worth 1, being the only honest one 1 more
        vpos = int(np.searchsorted(self._objective_keys["isolate"], self.victim))
        v = q[:, vpos]
        return v + (v & (q.sum(axis=1) == 1))

    def _selector(self, ledger: Ledger, candidates) -> int:
        t = self.schedule.round_starting_at(candidates[0].height + 1)
        if t is None or self.cfg.grind_objective is None:
            return 0
        inputs = [rnd_bytes(r, self.params) for r in prospective_randomness_many(ledger, candidates)]
        outputs = self.oracle.outputs_many(inputs, self._objective_keys[self.cfg.grind_objective])
        scores = self._score(outputs)
        idx = int(np.argmax(scores))
        self.grind_meta.setdefault(t, []).append(
            {"height": candidates[0].height, "candidates": len(candidates), "chosen": idx,
             "score": float(scores[idx])})
        return idx

    def _advance(self, n_blocks: int) -> None:
        if n_blocks > 0:
            advance_chain(self.ledger, n_blocks, self.adversary, self._selector, self._forced,
                          rng=self.adv_rng)

    # -- checkpoint actions --------------------------------------------------

    def _order(self, ids) -> list:
        ids = list(ids)
        if self.cfg.shuffle_clients:
            self.order_rng.shuffle(ids)
        return ids

    def start_round(self, t: int) -> None:
        L, p, cfg = self.ledger, self.params, self.cfg
        ell = self.schedule.start_of(t)
        assert L.finalized_height == ell
        rnd = L.view().randomness(ell)
        data = rnd_bytes(rnd, p)
        outputs = self.oracle.outputs(data)
        qualified = np.flatnonzero(_mask(outputs, cfg.c, p))
        messages = []
        for i in self._order(qualified):
            cl = self.clients[i]
            ev = self.oracle.evaluation(i, data)
            cl.round_eval[t] = ev
            messages.append(QualificationMessage(cl.pk, ev))
            self.action_log.append(("elect", int(i), L.finalized_height))
        init_tx, sent = server_initial_selection(self.server, t, rnd, messages, L)
        for pk, proof in sent.items():
            self.clients[self.cid_of[pk]].received_proofs[t] = proof
        self.live[t] = {"rnd": rnd, "qualified": [int(i) for i in qualified], "ell": ell,
                        "dispute_attempts": [], "initial": init_tx}

    def dispute_step(self, t: int) -> None:
        L = self.ledger
        view = L.view()
        rec = self.live[t]
        for i in self._order(rec["qualified"]):
            cl = self.clients[i]
            if not cl.honest:
                continue
            if cl.reg_proof is None:
                cl.reg_proof = self.server.reg_tree.prove(cl.pk)
            d = client_dispute(cl, t, view, self.contract)
            if d is not None:
                ok = L.submit(d)
                rec["dispute_attempts"].append((i, ok, d))
                self.action_log.append(("dispute", int(i), L.finalized_height))

    def final_step(self, t: int) -> None:
        tx, sent = server_final_selection(self.server, t, self.ledger)
        for pk, proof in sent.items():
            cl = self.clients[self.cid_of[pk]]
            stage1 = cl.received_proofs.get(t)
            if stage1 is not None:
                cl.received_proofs[t] = dataclasses.replace(stage1, final_txid=tx.txid, final_proof=proof)

    def _server_proof(self, rec, pk: bytes) -> SelectionProof:
        return SelectionProof(rec.t, pk, rec.issued[pk].evaluation, rec.initial_tx.txid,
                              rec.p_t.prove(pk), rec.final_tx.txid, rec.p_f.prove(pk))

    def _forged_proofs(self, rec) -> list[tuple[int, SelectionProof]]:
        """Equivocation: a 'not selected' proof for every pool member, built
        against a tree that omits it (so its root is not the committed one)."""
        out = []
        for pk in rec.p_t.leaves:
            fake = SortedMerkleTree.build(x for x in rec.p_t.leaves if x != pk)
            out.append((self.cid_of[pk], SelectionProof(rec.t, pk, rec.issued[pk].evaluation,
                                                        rec.initial_tx.txid, fake.prove(pk),
                                                        rec.final_tx.txid, rec.p_f.prove(pk))))
        return out

    def evaluate(self, t: int) -> dict:
        L, cfg, tau = self.ledger, self.cfg, self.tau
        live = self.live.pop(t)
        srec = self.server.rounds.pop(t)
        ell = live["ell"]
        F = L.finalized_height
        honest_ids = np.flatnonzero(self.honest)
        k = min(cfg.n_observers, len(honest_ids))
        obs = [int(x) for x in self.obs_rng.choice(honest_ids, size=k, replace=False)]
        # lagging observers hold any view in which both commitments are final
        heights = [F] + [int(self.obs_rng.integers(ell + 3 * tau, F + 1)) for _ in obs[1:]]
        views = [L.view(h) for h in heights]
        full = L.view()

        circulating = []
        for i in live["qualified"]:
            cl = self.clients[i]
            if cl.honest:
                circulating.append((i, assemble_proof(cl, t, full)))
        for pk in srec.issued:
            i = self.cid_of[pk]
            if not self.clients[i].honest:
                circulating.append((i, self._server_proof(srec, pk)))
        circulating.sort(key=lambda x: x[0])
        verdicts = []
        pool = set()
        for i, omega in circulating:
            row = [pver(v, omega, self.contract) for v in views]
            if PVer.SELECTED in row:
                pool.add(i)
            verdicts.append([i, *(_verdict(v) for v in row)])
        forged = []
        if cfg.behavior.equivocate:
            for i, omega in self._forged_proofs(srec):
                for j, v in enumerate(views):
                    verdict = pver(v, omega, self.contract)
                    if verdict == PVer.SELECTED:
                        pool.add(i)
                    forged.append([i, j, _verdict(verdict)])

        cid = self.cid_of
        txs = [_tx_record(live["initial"], L, cid)]
        disputes = []
        rejected = []
        for i, ok, d in sorted(live["dispute_attempts"], key=lambda a: a[0]):
            if ok:
                disputes.append(i)
                txs.append(_tx_record(d, L, cid))
            else:
                rejected.append(_tx_record(d, L, cid))
        txs.append(_tx_record(srec.final_tx, L, cid))
        for tx, _ in L.rejected:
            if getattr(tx, "round", None) == t and tx.kind.value == "final_selection":
                rejected.append(_tx_record(tx, L, cid))
        L.rejected = [(tx, h) for tx, h in L.rejected if getattr(tx, "round", None) != t]

        for i in live["qualified"]:
            self.clients[i].round_eval.pop(t, None)
            self.clients[i].received_proofs.pop(t, None)
        for pk in srec.issued:
            self.clients[cid[pk]].received_proofs.pop(t, None)
            self.clients[cid[pk]].round_eval.pop(t, None)

        return {
            "type": "round", "round": t, "start": ell, "rnd": format(live["rnd"], "x"),
            "qualified": live["qualified"],
            "p_t": sorted(cid[pk] for pk in srec.p_t.leaves),
            "withheld": sorted(cid[pk] for pk in srec.withheld),
            "disputes": sorted(disputes),
            "p_f": sorted(cid[pk] for pk in srec.p_f.leaves),
            "final_rejections": srec.final_rejections,
            "observers": [[j, h] for j, h in zip(obs, heights)],
            "verdicts": verdicts, "forged": forged, "pool": sorted(pool),
            "txs": txs, "rejected_txs": rejected,
            "adversary": {"objective": cfg.grind_objective, "grind": self.grind_meta.pop(t, [])},
        }

    # -- driver --------------------------------------------------------------

    def header(self) -> dict:
        return {
            "type": "header", "schema_version": SCHEMA_VERSION, "protocol": "secure",
            "config": self.cfg.summary(), "hash": HASH_NAME,
            "vrf": "rsa-fdh-sha256" if self.params.strict else "siphash-2-4-sim",
            "colluders": self.colluders, "victim": self.victim,
            "registration": _tx_record(self.registration, self.ledger, self.cid_of),
            "schedule": {"start": self.schedule.start, "tau": self.tau},
        }

    def run(self) -> Iterator[dict]:
        """Yield the header record, then one record per finished round."""
        yield self.header()
        L, S, tau, R = self.ledger, self.schedule, self.tau, self.cfg.rounds
        self._advance(S.start - L.finalized_height)
        h = S.start
        last = S.start_of(R - 1) + 4 * tau
        stages = ((4 * tau, self.evaluate), (2 * tau, self.final_step),
                  (tau, self.dispute_step), (0, self.start_round))
        while True:
            for offset, action in stages:
                t = S.round_starting_at(h - offset)
                if t is not None and t < R:
                    out = action(t)
                    if out is not None:
                        yield out
                        if self.cfg.prune:
                            L.prune_before(S.start_of(t + 1) - self.params.kappa - 1)
            if h >= last:
                return
            self._advance(tau)
            h += tau


def run_secure(cfg: SimulationConfig) -> Iterator[dict]:
    return SecureSimulation(cfg).run()


# -- baseline ----------------------------------------------------------------

def baseline_round_record(t: int, registry: Sequence[bytes], root: bytes, cid_of: dict, c,
                          params: SecurityParams, n_observers: int = 2,
                          ledger: Optional[Ledger] = None) -> dict:
    pool_pks = baseline_select(t, registry, c, params, root=root)
    pool = sorted(cid_of[pk] for pk in pool_pks)
    tx = BaselineSelection(t, tuple(sorted(pool_pks)))
    txs = []
    if ledger is not None:
        ledger.submit(tx)
        txs.append(_tx_record(tx, ledger, cid_of))
    else:
        txs.append({"kind": tx.kind.value, "bytes": tx.size, "payer": "server",
                    "ops": {"hash": len(registry), "storage_read": len(registry)}})
    # every observer recomputes the same deterministic pool
    return {
        "type": "round", "round": t, "rnd": None, "qualified": pool, "p_t": pool, "withheld": [],
        "disputes": [], "p_f": [], "final_rejections": 0,
        "observers": [[j, None] for j in range(n_observers)],
        "verdicts": [[i, *([1] * n_observers)] for i in pool], "forged": [], "pool": pool,
        "txs": txs, "rejected_txs": [], "adversary": {},
    }


class BaselineSimulation:
    """Baseline protocol: pool = clients with H(t || MRoot(U) || pk) below threshold."""

    def __init__(self, cfg: SimulationConfig, registry_keys=None):
        self.cfg = cfg
        self.params = cfg.params
        keys = registry_keys if registry_keys is not None else client_keys(self.params, cfg.seed, cfg.n)
        self.colluders, self.victim = choose_roles(len(keys), cfg.n_colluders, cfg.seed, cfg.victim)
        self.registry = [kp.pk for kp in keys]
        self.cid_of = {pk: i for i, pk in enumerate(self.registry)}
        self.root = SortedMerkleTree.build(self.registry).root
        tau = cfg.finality
        self.ledger = Ledger(self.params, tau, SelectionContract(self.params, cfg.c, RoundSchedule(0, tau)),
                             seed=int(_stream(cfg.seed, 2).integers(2**63)))
        self.registration = BaselineRegistration(tuple(self.registry))
        self.ledger.submit(self.registration)
        advance_chain(self.ledger, tau)

    def header(self) -> dict:
        return {
            "type": "header", "schema_version": SCHEMA_VERSION, "protocol": "baseline",
            "config": self.cfg.summary(), "hash": HASH_NAME, "vrf": None,
            "colluders": self.colluders, "victim": self.victim,
            "registration": _tx_record(self.registration, self.ledger, self.cid_of),
        }

    def run(self) -> Iterator[dict]:
        yield self.header()
        for t in range(self.cfg.rounds):
            yield baseline_round_record(t, self.registry, self.root, self.cid_of, self.cfg.c,
                                        self.params, self.cfg.n_observers, self.ledger)


def run_baseline(cfg: SimulationConfig) -> Iterator[dict]:
    return BaselineSimulation(cfg).run()
