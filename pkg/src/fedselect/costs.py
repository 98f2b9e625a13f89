"""On-chain storage and computation accounting over round traces.

Bytes are the canonical transaction encodings recorded in the trace;
computation is the contract's metered validation work priced by a
configurable ``CostTable`` (a stand-in for a gas schedule).
"""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field, fields
from typing import Iterable, Optional, Sequence

import numpy as np

from .simulation import SimulationConfig, run_baseline, run_secure

__all__ = ["CostTable", "CostReport", "ScalingReport", "account_round", "account_trace",
           "scaling_experiment", "linear_fit", "CSV_COLUMNS", "CostError"]

CSV_COLUMNS = ["protocol", "n", "round", "tx_kind", "bytes", "compute_units", "payer"]


class CostError(ValueError):
    pass


@dataclass(frozen=True)
class CostTable:
    storage_byte: float = 1.0
    hash: float = 1.0
    vrf_verify: float = 50.0
    merkle_step: float = 1.0
    signature: float = 10.0
    storage_read: float = 2.0
    storage_write: float = 20.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise CostError(f"cost {f.name} must be >= 0")

    def price(self, ops: dict) -> float:
        total = 0.0
        for op, count in ops.items():
            if not hasattr(self, op):
                raise CostError(f"no price for operation {op!r}")
            total += getattr(self, op) * count
        return total


@dataclass
class CostReport:
    protocol: str
    n: int
    rows: list = field(default_factory=list)
    per_round_bytes: dict = field(default_factory=dict)
    per_round_compute: dict = field(default_factory=dict)

    @property
    def total_bytes(self) -> int:
        return sum(self.per_round_bytes.values())

    @property
    def total_compute(self) -> float:
        return sum(self.per_round_compute.values())

    def by_payer(self, what: str = "bytes") -> dict:
        out: Counter = Counter()
        for r in self.rows:
            out["server" if r["payer"] == "server" else r["payer"]] += r[what]
        return dict(out)

    def by_kind(self, what: str = "bytes") -> dict:
        out: Counter = Counter()
        for r in self.rows:
            out[r["tx_kind"]] += r[what]
        return dict(out)

    def client_bytes(self) -> int:
        return sum(r["bytes"] for r in self.rows if r["payer"] != "server")

    def extend(self, other: "CostReport") -> None:
        if (other.protocol, other.n) != (self.protocol, self.n):
            raise CostError("can only merge reports of one protocol and n")
        self.rows.extend(other.rows)
        for k, v in other.per_round_bytes.items():
            self.per_round_bytes[k] = self.per_round_bytes.get(k, 0) + v
        for k, v in other.per_round_compute.items():
            self.per_round_compute[k] = self.per_round_compute.get(k, 0.0) + v

    def to_csv(self, fh=None) -> str:
        buf = fh if fh is not None else io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows)
        return buf.getvalue() if fh is None else ""

    def summary(self) -> dict:
        return {"protocol": self.protocol, "n": self.n, "rounds": len(self.per_round_bytes),
                "total_bytes": self.total_bytes, "total_compute": self.total_compute,
                "by_payer_bytes": self.by_payer(), "by_kind_bytes": self.by_kind()}


def account_round(record: dict, table: CostTable, protocol: str = "secure", n: int = 0) -> CostReport:
    """Bytes and priced computation of the transactions committed in one round."""
    if record.get("type") != "round" or "txs" not in record:
        raise CostError("expected a complete round record")
    t = record["round"]
    rep = CostReport(protocol, n)
    b = cu = 0.0
    for tx in record["txs"]:
        units = table.price(tx.get("ops", {})) + table.storage_byte * tx["bytes"]
        rep.rows.append({"protocol": protocol, "n": n, "round": t, "tx_kind": tx["kind"],
                         "bytes": tx["bytes"], "compute_units": units, "payer": tx["payer"]})
        b += tx["bytes"]
        cu += units
    rep.per_round_bytes[t] = int(b)
    rep.per_round_compute[t] = cu
    return rep


def account_trace(records: Iterable[dict], table: CostTable) -> CostReport:
    """Account every round of one trace (header first)."""
    rep = None
    for rec in records:
        if rec.get("type") == "header":
            protocol, n = rec["protocol"], rec["config"]["n"]
            rep = CostReport(protocol, n)
        elif rec.get("type") == "round":
            if rep is None:
                raise CostError("round record before header")
            rep.extend(account_round(rec, table, rep.protocol, rep.n))
    if rep is None:
        raise CostError("empty trace")
    return rep


def linear_fit(x: Sequence[float], y: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares slope, intercept and R^2."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xm, xs = x.mean(), (x.std() or 1.0)
    a, b = np.polyfit((x - xm) / xs, y, 1)
    slope, intercept = a / xs, b - a * xm / xs
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


@dataclass
class ScalingReport:
    protocol: str
    ns: list
    rounds: int
    cumulative_bytes: list
    per_round_bytes: list
    cumulative_compute: list
    slope: float
    intercept: float
    r2: float
    cv: float

    def to_json(self) -> dict:
        return dict(self.__dict__)


def scaling_experiment(protocol: str, ns: Sequence[int], rounds: int, table: Optional[CostTable] = None,
                       c=0.01, seed: int = 0, **cfg_kwargs) -> tuple[ScalingReport, list[CostReport]]:
    """Cumulative on-chain cost over ``rounds`` rounds for each n, with a linear fit in n."""
    if rounds < 1:
        raise CostError("rounds must be >= 1")
    if protocol not in ("secure", "baseline"):
        raise CostError(f"unknown protocol {protocol!r}")
    table = table or CostTable()
    # costs do not depend on how many observers re-check the pool
    cfg_kwargs.setdefault("n_observers", 1)
    reports = []
    for n in ns:
        cfg = SimulationConfig(n=n, c=c, rounds=rounds, seed=seed, **cfg_kwargs)
        run = run_secure if protocol == "secure" else run_baseline
        reports.append(account_trace(run(cfg), table))
    cum = [r.total_bytes for r in reports]
    per_round = [r.total_bytes / rounds for r in reports]
    slope, intercept, r2 = linear_fit(ns, cum)
    mean = float(np.mean(per_round))
    cv = float(np.std(per_round) / mean) if mean else 0.0
    return ScalingReport(protocol, list(ns), rounds, cum, per_round, [r.total_compute for r in reports],
                         slope, intercept, r2, cv), reports
