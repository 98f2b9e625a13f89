"""Command-line entry point: simulate, attack, check, costs.

Exit codes: 0 success, 1 a checked property failed, 2 usage or input error.
Every output is a deterministic function of the config and master seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from typing import Iterable, Optional

import numpy as np

from . import SCHEMA_VERSION
from .adversary import (
    AttackError,
    BaselineGrinding,
    ForcedSelection,
    SecureSelection,
    colluding_attack,
    grinding_attack_baseline,
    grinding_attack_secure,
    noncolluding_attack,
    write_outcomes_csv,
    AttackOutcome,
)
from .config import ATTACKS, ConfigError, ExperimentConfig, load_config
from .costs import CSV_COLUMNS, CostTable, account_trace, scaling_experiment
from .fedavg import FLEngine, fedavg_round, train
from .protocol import ServerBehavior
from .simulation import SecureSimulation, run_baseline, run_secure
from .stats import (
    FOUR_SIGMA,
    MIN_ROUNDS,
    PropertyReport,
    StatsError,
    anti_targeting_all,
    check_pool_consistency,
    colluder_excess_test,
    estimate_anti_targeting,
    estimate_pool_quality,
    reports_table,
)

__all__ = ["main", "build_parser", "read_trace", "CliError"]


class CliError(Exception):
    """Bad input: reported on stderr with exit code 2."""


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _write_jsonl(path: str, records: Iterable[dict]) -> int:
    n = 0
    with open(path, "w") as fh:
        for rec in records:
            fh.write(_dumps(rec) + "\n")
            n += 1
    return n


def _write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_trace(path: str) -> list[dict]:
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as e:
        raise CliError(f"cannot read {path}: {e}") from None
    out = []
    for k, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise CliError(f"{path}:{k}: corrupt JSON ({e.msg})") from None
        if not isinstance(rec, dict):
            raise CliError(f"{path}:{k}: expected a JSON object")
        out.append(rec)
    return out


def _trace_files(paths: list[str]) -> list[str]:
    files = []
    for p in paths:
        if os.path.isdir(p):
            files.extend(os.path.join(p, f) for f in sorted(os.listdir(p)) if f.endswith(".jsonl"))
        elif os.path.exists(p):
            files.append(p)
        else:
            raise CliError(f"no such trace file or directory: {p}")
    return files


def _out_dir(cfg: ExperimentConfig) -> str:
    out = cfg.out or "out"
    os.makedirs(out, exist_ok=True)
    return out


# -- simulate ----------------------------------------------------------------

def run_simulate(cfg: ExperimentConfig) -> int:
    if cfg.protocol == "none":
        raise CliError("simulate needs protocol 'secure' or 'baseline'")
    try:
        sim_cfg = cfg.simulation()
    except ConfigError as e:
        raise CliError(str(e)) from None
    out = _out_dir(cfg)
    run = run_secure if cfg.protocol == "secure" else run_baseline
    rounds = []

    def tee():
        for rec in run(sim_cfg):
            if rec["type"] == "round":
                rounds.append(rec)
            yield rec

    _write_jsonl(os.path.join(out, "trace.jsonl"), tee())
    sizes = [len(r["pool"]) for r in rounds]
    summary = {
        "schema_version": SCHEMA_VERSION, "protocol": cfg.protocol, "config": sim_cfg.summary(),
        "rounds": len(rounds), "mean_pool": float(np.mean(sizes)), "empty_pools": sizes.count(0),
        "disputes": sum(len(r["disputes"]) for r in rounds),
        "bytes": sum(tx["bytes"] for r in rounds for tx in r["txs"]),
    }
    _write_json(os.path.join(out, "summary.json"), summary)
    print(f"simulate: {len(rounds)} rounds, mean pool {summary['mean_pool']:.2f}, "
          f"{summary['disputes']} disputes -> {out}/trace.jsonl")
    return 0


# -- attack ------------------------------------------------------------------

def _engine(cfg: ExperimentConfig, n: int, colluders) -> FLEngine:
    return FLEngine(replace(cfg.fl, n_clients=n, seed=cfg.seed), colluders=colluders)


def _attack_roles(cfg: ExperimentConfig, n: int):
    a = cfg.attack
    k = a.colluders
    if not 0 <= a.victim < n - k:
        raise CliError(f"victim must be one of the honest ids 0..{n - k - 1}")
    return a.victim, list(range(n - k, n))


def _selection_source(cfg: ExperimentConfig, n: int):
    if cfg.protocol == "none":
        return ForcedSelection()
    if cfg.protocol == "baseline":
        return BaselineGrinding(n, cfg.selection.c, cfg.attack.key_budget, cfg.seed)
    return SecureSelection(n, cfg.selection.c, cfg.seed)


def _colluding(cfg: ExperimentConfig) -> list[AttackOutcome]:
    n = cfg.selection.n
    victim, colluders = _attack_roles(cfg, n)
    if not colluders:
        raise CliError("the colluding attack needs attack.colluders >= 1")
    engine = _engine(cfg, n, colluders)
    source = _selection_source(cfg, n)
    g = engine.initial_model()
    return [colluding_attack(source, victim, colluders, engine, g, t=tr, trial=tr)
            for tr in range(cfg.attack.trials)]


def _noncolluding(cfg: ExperimentConfig) -> list[AttackOutcome]:
    if cfg.protocol == "baseline":
        raise CliError("the non-colluding attack has no colluder keys to grind under the baseline; "
                       "use protocol 'none' or 'secure'")
    n = cfg.selection.n
    a = cfg.attack
    cohort = [i for i in range(n) if i != a.victim][:a.cohort]
    if len(cohort) < 1 or not 0 <= a.victim < n:
        raise CliError("need a victim id below n and a nonempty cohort")
    engine = _engine(cfg, n, ())
    source = _selection_source(cfg, n)
    g = engine.initial_model()
    if a.warmup_rounds:
        g, _ = train(engine, a.warmup_rounds, min(n, max(2, a.cohort + 1)), seed=cfg.seed)
    outs = []
    for tr in range(a.trials):
        t = a.warmup_rounds + 2 * tr
        o = noncolluding_attack(source, a.victim, cohort, engine, g, a.reuse_global, t=t, trial=2 * tr)
        outs.append(o)
        if not a.reuse_global:
            g, _ = fedavg_round(sorted({a.victim, *cohort}), g, engine, t)
    return outs


def _grind_baseline(cfg: ExperimentConfig, out: str) -> list[AttackOutcome]:
    if cfg.protocol != "baseline":
        raise CliError("grind-baseline needs protocol 'baseline'")
    s, a = cfg.selection, cfg.attack
    n_col = max(1, int(round(s.beta * s.n)))
    victim, colluders = a.victim, list(range(s.n - n_col, s.n))
    if victim >= s.n - n_col:
        raise CliError("victim must be honest")
    objective = a.objective or "target"
    outs = []
    for tr in range(a.trials):
        try:
            o = grinding_attack_baseline(colluders, s.n, objective, a.key_budget, s.c, victim=victim,
                                         seed=cfg.seed * 1_000_003 + tr, honest_seed=cfg.seed)
        except AttackError as e:
            raise CliError(str(e)) from None
        outs.append(o)
    header = {"type": "header", "schema_version": SCHEMA_VERSION, "protocol": "baseline",
              "config": {"n": s.n, "c": f"{s.c.numerator}/{s.c.denominator}", "beta": n_col / s.n,
                         "seed": cfg.seed, "key_budget": a.key_budget, "grind_objective": objective},
              "colluders": colluders, "victim": victim}
    recs = [header]
    for tr, o in enumerate(outs):
        rec = dict(o.trials["records"][0])
        rec["round"] = tr
        rec["adversary"] = {"objective": objective, "key_budget": a.key_budget,
                            "chosen_key": o.trials["chosen_key"]}
        recs.append(rec)
        del o.trials["records"]
    _write_jsonl(os.path.join(out, "trace.jsonl"), recs)
    return outs


def _grind_secure(cfg: ExperimentConfig) -> list[AttackOutcome]:
    if cfg.protocol != "secure":
        raise CliError("grind-secure needs protocol 'secure'")
    s, a = cfg.selection, cfg.attack
    n_col = int(round(s.beta * s.n))
    try:
        return [grinding_attack_secure(max(1, s.g), a.objective or "victim", s.c, s.n - n_col, n_col,
                                       trials=a.trials, seed=cfg.seed, kappa=cfg.kappa)]
    except AttackError as e:
        raise CliError(str(e)) from None


def _omission(cfg: ExperimentConfig, out: str) -> list[AttackOutcome]:
    if cfg.protocol != "secure":
        raise CliError("omission needs protocol 'secure'")
    frac = cfg.server.drop_fraction or 1.0
    sim_cfg = replace(cfg.simulation(), behavior=ServerBehavior(
        drop_fraction=frac, withhold_only=cfg.server.withhold_only,
        omit_disputer_in_final=cfg.server.omit_disputer_in_final))
    sim = SecureSimulation(sim_cfg)
    recs = list(sim.run())
    _write_jsonl(os.path.join(out, "trace.jsonl"), recs)
    cols = set(sim.colluders)
    outs = []
    for r in recs[1:]:
        dropped = [i for i in r["withheld"] if i not in cols]
        excluded = [i for i in dropped if i not in r["pool"]]
        outs.append(AttackOutcome("omission", None, bool(excluded), r["pool"], trials={
            "round": r["round"], "dropped": dropped, "disputes": r["disputes"], "excluded": excluded,
            "final_rejections": r["final_rejections"]}))
    return outs


def run_attack(cfg: ExperimentConfig, name: Optional[str]) -> int:
    name = name or cfg.attack.name
    if name is None:
        raise CliError("no attack named: pass --name or set [attack] name")
    out = _out_dir(cfg)
    if name == "colluding":
        outs = _colluding(cfg)
    elif name == "noncolluding":
        outs = _noncolluding(cfg)
    elif name == "grind-baseline":
        outs = _grind_baseline(cfg, out)
    elif name == "grind-secure":
        outs = _grind_secure(cfg)
    else:
        outs = _omission(cfg, out)
    _write_jsonl(os.path.join(out, "outcomes.jsonl"),
                 ({"schema_version": SCHEMA_VERSION, **o.to_json()} for o in outs))
    with open(os.path.join(out, "outcomes.csv"), "w") as fh:
        write_outcomes_csv(outs, fh)
    wins = sum(o.success for o in outs)
    print(f"attack {name} ({cfg.protocol}): {wins}/{len(outs)} successful -> {out}/outcomes.jsonl")
    return 0


# -- check -------------------------------------------------------------------

def check_trace(records: list[dict], cfg: ExperimentConfig) -> list[PropertyReport]:
    header = next((r for r in records if r.get("type") == "header"), {})
    rounds = [r for r in records if r.get("type") == "round"]
    reports = [check_pool_consistency(records)]
    conf = header.get("config", {})
    c = conf.get("c")
    if c is not None and len(rounds) >= MIN_ROUNDS:
        victim = header.get("victim")
        if victim is not None:
            reports.append(estimate_anti_targeting(records, victim, c))
        n = conf.get("n")
        # family-wise 4-sigma level over all honest clients
        reports.append(anti_targeting_all(records, c, n, tail=FOUR_SIGMA / max(1, n or 1)))
    if any(r["pool"] for r in rounds):
        reports.append(estimate_pool_quality(records, eps=cfg.check.eps, floor=cfg.check.floor))
        if header.get("protocol") == "baseline" and float(conf.get("beta", 0)) > 0:
            reports.append(colluder_excess_test(records, alpha_level=cfg.check.alpha_level))
    return reports


def run_check(cfg: ExperimentConfig, paths: list[str]) -> int:
    files = _trace_files(paths)
    traces = []
    for f in files:
        recs = read_trace(f)
        if any(r.get("type") == "header" for r in recs):
            if not any(r.get("type") == "round" for r in recs):
                raise CliError(f"{f}: trace has no round records")
            traces.append((f, recs))
    if not traces:
        raise CliError("no trace files found")
    out = _out_dir(cfg)
    all_reports = []
    failed = False
    for f, recs in traces:
        try:
            reps = check_trace(recs, cfg)
        except StatsError as e:
            raise CliError(f"{f}: {e}") from None
        print(f"== {f}")
        print(reports_table(reps))
        failed |= not all(r.passed for r in reps)
        all_reports.append({"trace": f, "reports": [r.to_json() for r in reps]})
    _write_json(os.path.join(out, "reports.json"), {"schema_version": SCHEMA_VERSION, "traces": all_reports,
                                                    "passed": not failed})
    return 1 if failed else 0


# -- costs -------------------------------------------------------------------

def run_costs(cfg: ExperimentConfig, traces: list[str]) -> int:
    out = _out_dir(cfg)
    table = CostTable()
    rows, summary = [], {"schema_version": SCHEMA_VERSION}
    if traces:
        summary["traces"] = []
        for f in _trace_files(traces):
            recs = read_trace(f)
            if not any(r.get("type") == "header" for r in recs):
                continue
            rep = account_trace(recs, table)
            rows.extend(rep.rows)
            summary["traces"].append({"trace": f, **rep.summary()})
    else:
        summary["scaling"] = []
        for p in cfg.costs.protocols:
            sc, reps = scaling_experiment(p, cfg.costs.ns, cfg.costs.rounds, table, c=cfg.selection.c,
                                          seed=cfg.seed)
            for r in reps:
                rows.extend(r.rows)
            summary["scaling"].append(sc.to_json())
            print(f"costs {p}: per-round bytes {sc.per_round_bytes} slope {sc.slope:.4g} "
                  f"R2 {sc.r2:.4f} cv {sc.cv:.4f}")
    with open(os.path.join(out, "costs.csv"), "w") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    _write_json(os.path.join(out, "costs.json"), summary)
    return 0


# -- driver ------------------------------------------------------------------

def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=d, help="master seed (overrides the config)")
    p.add_argument("--config", default=d, help="TOML experiment config")
    p.add_argument("--out", default=d, help="output directory")
    p.add_argument("--strict-crypto", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="use the RSA-FDH VRF instead of the fast simulation VRF")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedselect", description="Verifiable client selection simulator")
    _global_flags(ap, suppress=False)
    sub = ap.add_subparsers(dest="command", required=True)
    sp = sub.add_parser("simulate", help="run R rounds and write a trace")
    _global_flags(sp, suppress=True)
    sp = sub.add_parser("attack", help="run an attack for N trials")
    _global_flags(sp, suppress=True)
    sp.add_argument("--name", choices=ATTACKS)
    sp.add_argument("--trials", type=int)
    sp = sub.add_parser("check", help="check pool consistency, quality and anti-targeting on traces")
    _global_flags(sp, suppress=True)
    sp.add_argument("paths", nargs="+")
    sp = sub.add_parser("costs", help="on-chain cost accounting")
    _global_flags(sp, suppress=True)
    sp.add_argument("--trace", nargs="*", default=[])
    return ap


def main(argv: Optional[list[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = load_config(args.config).with_overrides(args.seed, args.out, args.strict_crypto)
        if args.command == "simulate":
            return run_simulate(cfg)
        if args.command == "attack":
            if args.trials is not None:
                if args.trials < 1:
                    raise CliError("--trials must be >= 1")
                cfg = replace(cfg, attack=replace(cfg.attack, trials=args.trials))
            return run_attack(cfg, args.name)
        if args.command == "check":
            return run_check(cfg, args.paths)
        return run_costs(cfg, args.trace)
    except (CliError, ConfigError) as e:
        print(f"fedselect: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
