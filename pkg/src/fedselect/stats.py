"""Executable checks of pool consistency, pool quality and anti-targeting.

All checks consume trace records (plain dicts, header records interleaved
with round records) and are pure functions of them, so re-running an
analysis over stored traces reproduces the report exactly.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np
from scipy import stats as sps

from .vrf import as_fraction

__all__ = [
    "PropertyReport", "StatsError", "FOUR_SIGMA", "iter_rounds", "check_pool_consistency",
    "estimate_anti_targeting", "anti_targeting_all", "estimate_pool_quality", "colluder_excess_test",
    "chernoff_bound", "bernoulli_tails", "binomial_band", "clopper_pearson", "selection_counts",
    "uniformity_chi2", "reports_table", "rates_csv", "MIN_ROUNDS",
]

# two-sided tail mass of a standard normal beyond 4 sigma
FOUR_SIGMA = math.erfc(4 / math.sqrt(2))
MIN_ROUNDS = 100


class StatsError(ValueError):
    pass


@dataclass
class PropertyReport:
    property: str
    trials: int
    violations: int
    estimate: Optional[float]
    ci: Optional[tuple]
    ci_method: str
    bound: Optional[float]
    passed: bool
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.violations <= self.trials:
            raise StatsError("violations must lie in [0, trials]")

    def to_json(self) -> dict:
        d = asdict(self)
        d["ci"] = None if self.ci is None else list(self.ci)
        return d


def iter_rounds(traces: Iterable[dict]) -> Iterator[tuple[dict, dict]]:
    """(header, round record) pairs; a record before any header gets an empty header."""
    header: dict = {}
    for rec in traces:
        kind = rec.get("type")
        if kind == "header":
            header = rec
        elif kind == "round":
            yield header, rec


def clopper_pearson(k: int, n: int, tail: float = FOUR_SIGMA) -> tuple[float, float]:
    """Exact two-sided binomial interval with total tail mass ``tail``."""
    if n <= 0:
        raise StatsError("need at least one trial")
    lo = 0.0 if k == 0 else float(sps.beta.ppf(tail / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(sps.beta.isf(tail / 2, k + 1, n - k))
    return lo, hi


def binomial_band(n: int, p, tail: float = FOUR_SIGMA) -> tuple[int, int]:
    """Counts [lo, hi] outside of which Binomial(n, p) puts at most ``tail`` mass."""
    p = float(as_fraction(p))
    if p >= 1.0:
        return n, n
    return int(sps.binom.ppf(tail / 2, n, p)), int(sps.binom.isf(tail / 2, n, p))


# -- pool consistency -------------------------------------------------------

def check_pool_consistency(traces: Iterable[dict]) -> PropertyReport:
    """Count (client, round, observer pair) tuples with a 1 against a 0.

    Verdicts on server-forged proofs count too: a forged "not selected"
    accepted by one observer while another accepts the genuine proof is a
    violation. ``None`` (invalid) never conflicts.
    """
    trials = violations = rounds = 0
    examples = []
    for _, rec in iter_rounds(traces):
        rounds += 1
        seen: dict[int, dict[int, set]] = {}
        for row in rec.get("verdicts", []):
            i, vs = row[0], row[1:]
            for j, v in enumerate(vs):
                seen.setdefault(i, {}).setdefault(j, set()).add(v)
        for i, j, v in rec.get("forged", []):
            seen.setdefault(i, {}).setdefault(j, set()).add(v)
        for i, per_obs in seen.items():
            trials += 1
            obs = sorted(per_obs)
            bad = 0
            for a in range(len(obs)):
                for b in range(a, len(obs)):
                    va, vb = per_obs[obs[a]], per_obs[obs[b]]
                    if (1 in va and 0 in vb) or (0 in va and 1 in vb):
                        bad += 1
            if bad:
                violations += 1
                if len(examples) < 10:
                    examples.append({"round": rec.get("round"), "client": i, "pairs": bad})
    return PropertyReport("pool_consistency", trials, violations, (violations / trials) if trials else None,
                          None, "count", 0.0, violations == 0, {"rounds": rounds, "examples": examples})


# -- anti-targeting ----------------------------------------------------------

def selection_counts(traces: Iterable[dict], n: Optional[int] = None) -> tuple[np.ndarray, int, list]:
    """Per-client pool counts, number of rounds and the colluder list."""
    counts: dict[int, int] = {}
    rounds = 0
    colluders: set = set()
    for header, rec in iter_rounds(traces):
        colluders.update(header.get("colluders", []))
        if n is None and header.get("config"):
            n = header["config"].get("n")
        rounds += 1
        for i in rec.get("pool", []):
            counts[i] = counts.get(i, 0) + 1
    size = n if n is not None else (max(counts) + 1 if counts else 0)
    arr = np.zeros(size, dtype=np.int64)
    for i, k in counts.items():
        arr[i] = k
    return arr, rounds, sorted(colluders)


def estimate_anti_targeting(traces: Iterable[dict], client: int, c, tail: float = FOUR_SIGMA
                            ) -> PropertyReport:
    """Empirical Pr[client in pool]; passes iff c lies inside the exact CI."""
    c = as_fraction(c)
    hits = rounds = 0
    for _, rec in iter_rounds(traces):
        rounds += 1
        hits += client in rec.get("pool", [])
    if rounds < MIN_ROUNDS:
        raise StatsError(f"anti-targeting needs at least {MIN_ROUNDS} rounds, got {rounds}")
    lo, hi = clopper_pearson(hits, rounds, tail)
    pval = float(sps.binomtest(hits, rounds, float(c)).pvalue)
    ok = lo <= float(c) <= hi
    return PropertyReport("anti_targeting", rounds, 0 if ok else 1, hits / rounds, (lo, hi),
                          f"clopper-pearson tail={tail:.3g}", float(c), ok,
                          {"client": client, "hits": hits, "p_value": pval})


def anti_targeting_all(traces: Iterable[dict], c, n: Optional[int] = None, tail: float = FOUR_SIGMA,
                       honest_only: bool = True) -> PropertyReport:
    """Every client's selection count must fall inside the binomial band around c."""
    c = as_fraction(c)
    counts, rounds, colluders = selection_counts(traces, n)
    if rounds < MIN_ROUNDS:
        raise StatsError(f"anti-targeting needs at least {MIN_ROUNDS} rounds, got {rounds}")
    lo, hi = binomial_band(rounds, c, tail)
    skip = set(colluders) if honest_only else set()
    clients = [i for i in range(len(counts)) if i not in skip]
    sub = counts[clients]
    outside = [int(i) for i, k in zip(clients, sub) if not lo <= k <= hi]
    return PropertyReport("anti_targeting", len(clients), len(outside), float(sub.mean() / rounds),
                          (lo / rounds, hi / rounds), f"binomial band tail={tail:.3g}", float(c),
                          not outside, {"rounds": rounds, "band_counts": [lo, hi], "outside": outside[:20],
                                        "min_count": int(sub.min()), "max_count": int(sub.max())})


# -- pool quality ------------------------------------------------------------

def estimate_pool_quality(traces: Iterable[dict], alpha: Optional[float] = None, eps: float = 0.2,
                          floor: float = 0.99, tail: float = FOUR_SIGMA) -> PropertyReport:
    """Fraction of rounds whose honest share of the pool is at least alpha(1-eps).

    ``alpha`` defaults to 1 - beta from the trace header. Empty pools are
    excluded from the estimate and counted separately.
    """
    good = total = empty = 0
    worst = 1.0
    target = None
    for header, rec in iter_rounds(traces):
        cols = set(header.get("colluders", []))
        a = alpha if alpha is not None else 1.0 - float(header.get("config", {}).get("beta", 0.0))
        target = a * (1 - eps)
        pool = rec.get("pool", [])
        if not pool:
            empty += 1
            continue
        total += 1
        ratio = sum(i not in cols for i in pool) / len(pool)
        worst = min(worst, ratio)
        # tolerance absorbs float rounding of a*(1-eps) at exact boundaries
        good += ratio >= target - 1e-12
    if total == 0:
        raise StatsError("no rounds with a nonempty pool")
    est = good / total
    ci = clopper_pearson(good, total, tail)
    return PropertyReport("pool_quality", total, total - good, est, ci, f"clopper-pearson tail={tail:.3g}",
                          floor, est >= floor, {"empty_rounds": empty, "target_ratio": target,
                                                "eps": eps, "worst_ratio": worst})


def colluder_excess_test(traces: Iterable[dict], beta: Optional[float] = None, alpha_level: float = 1e-3
                         ) -> PropertyReport:
    """One-sided exact binomial test of 'colluder share of pool seats > beta'.

    Passes (no excess) unless the null is rejected at ``alpha_level``.
    """
    seats = col = 0
    b = beta
    for header, rec in iter_rounds(traces):
        cols = set(header.get("colluders", []))
        if beta is None:
            b = float(header.get("config", {}).get("beta", 0.0))
        pool = rec.get("pool", [])
        seats += len(pool)
        col += sum(i in cols for i in pool)
    if seats == 0:
        raise StatsError("no pool seats to test")
    if b is None or not 0 <= b < 1:
        raise StatsError("beta must lie in [0, 1)")
    pval = float(sps.binomtest(col, seats, b, alternative="greater").pvalue) if b > 0 else (1.0 if col == 0 else 0.0)
    ok = pval >= alpha_level
    return PropertyReport("pool_quality_excess", seats, col, col / seats, None,
                          "one-sided exact binomial", b, ok, {"p_value": pval, "alpha_level": alpha_level})


# -- concentration -----------------------------------------------------------

def chernoff_bound(n: int, mu: float, eps: float, tail: str) -> float:
    """Multiplicative Chernoff bound on Pr[X <= (1-eps)n mu] or Pr[X >= (1+eps)n mu]."""
    if not eps > 0 or not 0 < mu < 1 or n < 1:
        raise StatsError("need eps > 0, 0 < mu < 1 and n >= 1")
    if tail == "lower":
        return math.exp(-eps * eps * n * mu / 2)
    if tail == "upper":
        return math.exp(-eps * eps * n * mu / 3)
    raise StatsError(f"tail must be 'lower' or 'upper', not {tail!r}")


def bernoulli_tails(n: int, mu: float, eps: float, samples: int, seed: int = 0) -> dict:
    """Empirical tail frequencies of a sum of n Bernoulli(mu) draws."""
    rng = np.random.default_rng([seed, 17])
    x = rng.binomial(n, mu, size=samples)
    lo = float(np.mean(x <= (1 - eps) * n * mu))
    hi = float(np.mean(x >= (1 + eps) * n * mu))
    return {"lower": lo, "upper": hi, "lower_bound": chernoff_bound(n, mu, eps, "lower"),
            "upper_bound": chernoff_bound(n, mu, eps, "upper")}


def uniformity_chi2(values: Sequence[int], bits: int, bins: int = 64) -> float:
    """Chi-square p-value of ``bits``-bit integers falling uniformly into ``bins`` buckets."""
    shift = bits - int(math.log2(bins))
    idx = np.array([int(v) >> shift for v in values], dtype=np.int64)
    counts = np.bincount(idx, minlength=bins)
    return float(sps.chisquare(counts).pvalue)


# -- output ------------------------------------------------------------------

def reports_table(reports: Sequence[PropertyReport]) -> str:
    lines = [f"{'property':<22}{'trials':>9}{'viol':>7}{'estimate':>11}  result"]
    for r in reports:
        est = "-" if r.estimate is None else f"{r.estimate:.4f}"
        lines.append(f"{r.property:<22}{r.trials:>9}{r.violations:>7}{est:>11}  {'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines)


def rates_csv(traces: Iterable[dict], n: Optional[int] = None) -> str:
    counts, rounds, colluders = selection_counts(traces, n)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["client", "selected", "rounds", "rate", "colluder"])
    cols = set(colluders)
    for i, k in enumerate(counts):
        w.writerow([i, int(k), rounds, (k / rounds) if rounds else "", int(i in cols)])
    return buf.getvalue()


def dumps(report: PropertyReport) -> str:
    return json.dumps(report.to_json(), sort_keys=True)
