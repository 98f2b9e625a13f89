"""Toy federated averaging over a synthetic linear-regression task.

The server only ever sees sums of local models: ``SumOracle`` returns the
aggregate of a pool and logs who asked. Individual updates leave the
engine only through ``reveal``, which is restricted to declared colluders
and logged as well, so tests can assert no other path exists.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "TaskConfig", "ClientDataset", "make_datasets", "local_train", "secure_aggregate",
    "SumOracle", "AggregationTranscript", "FLEngine", "fedavg_round", "FLError", "train", "cosine",
    "halving_iterations", "loss", "make_dataset",
]


class FLError(ValueError):
    pass


@dataclass(frozen=True)
class TaskConfig:
    n_clients: int = 50
    d: int = 10
    samples: int = 1000
    noise: float = 0.1
    heterogeneity: float = 0.5
    task: str = "regression"
    epochs: int = 1
    lr: float = 0.1
    seed: int = 0
    stochastic: bool = False
    batch_size: int = 100

    def __post_init__(self):
        if self.task not in ("regression", "logistic"):
            raise FLError(f"unknown task {self.task!r}")
        if self.n_clients < 1 or self.d < 1 or self.samples < 1:
            raise FLError("n_clients, d and samples must be positive")
        if self.epochs < 1 or not self.lr > 0:
            raise FLError("need epochs >= 1 and lr > 0")


@dataclass(frozen=True)
class ClientDataset:
    cid: int
    X: np.ndarray
    y: np.ndarray
    seed: int
    task: str = "regression"


def _ground_truth(cfg: TaskConfig) -> np.ndarray:
    return np.random.default_rng([cfg.seed, 0]).normal(size=cfg.d)


def make_dataset(cfg: TaskConfig, cid: int) -> ClientDataset:
    """Client data: shared weight plus a client-specific shift, noisy targets."""
    rng = np.random.default_rng([cfg.seed, 1, cid])
    w = _ground_truth(cfg) + cfg.heterogeneity * rng.normal(size=cfg.d)
    X = rng.normal(size=(cfg.samples, cfg.d))
    z = X @ w
    if cfg.task == "regression":
        y = z + cfg.noise * rng.normal(size=cfg.samples)
    else:
        y = (rng.random(cfg.samples) < 1.0 / (1.0 + np.exp(-z))).astype(float)
    return ClientDataset(cid, X, y, cfg.seed, cfg.task)


def make_datasets(cfg: TaskConfig) -> list[ClientDataset]:
    return [make_dataset(cfg, i) for i in range(cfg.n_clients)]


def _gradient(w: np.ndarray, X: np.ndarray, y: np.ndarray, task: str) -> np.ndarray:
    if task == "regression":
        return X.T @ (X @ w - y) / len(y)
    return X.T @ (1.0 / (1.0 + np.exp(-(X @ w))) - y) / len(y)


def loss(w: np.ndarray, data: ClientDataset) -> float:
    z = data.X @ w
    if data.task == "regression":
        return float(np.mean((z - data.y) ** 2) / 2)
    return float(np.mean(np.logaddexp(0.0, z) - data.y * z))


def local_train(global_model: np.ndarray, data: ClientDataset, epochs: int, lr: float,
                seed: Optional[int] = None, stochastic: bool = False, batch_size: int = 100
                ) -> np.ndarray:
    """Gradient descent from ``global_model``; full batch unless ``stochastic``."""
    if epochs < 1:
        raise FLError("epochs must be >= 1")
    if not lr > 0:
        raise FLError("lr must be positive")
    w = np.array(global_model, dtype=float, copy=True)
    rng = np.random.default_rng([data.seed, data.cid, 0 if seed is None else seed]) if stochastic else None
    n = len(data.y)
    for _ in range(epochs):
        # overflow is caught by the finiteness check below
        with np.errstate(over="ignore", invalid="ignore"):
            if rng is None:
                w -= lr * _gradient(w, data.X, data.y, data.task)
            else:
                order = rng.permutation(n)
                for s in range(0, n, batch_size):
                    idx = order[s:s + batch_size]
                    w -= lr * _gradient(w, data.X[idx], data.y[idx], data.task)
        if not np.all(np.isfinite(w)):
            raise FLError("training diverged (non-finite parameters)")
    return w


def secure_aggregate(updates: Sequence[np.ndarray]) -> np.ndarray:
    """Sum of the updates, accumulated in the given order."""
    if len(updates) == 0:
        raise FLError("nothing to aggregate")
    first = np.asarray(updates[0], dtype=float)
    total = first.copy()
    for u in updates[1:]:
        u = np.asarray(u, dtype=float)
        if u.shape != first.shape:
            raise FLError(f"dimension mismatch: {u.shape} vs {first.shape}")
        total += u
    return total


@dataclass(frozen=True)
class AggregationTranscript:
    """Everything the server learns from one round: pool, sum, new model."""

    round: int
    pool: tuple
    sum: np.ndarray
    global_next: np.ndarray

    def to_json(self) -> dict:
        return {"round": self.round, "pool": list(self.pool), "sum": self.sum.tolist(),
                "global_next": self.global_next.tolist()}


@dataclass
class SumOracle:
    """Server-facing view of secure aggregation."""

    engine: "FLEngine"
    access_log: list = field(default_factory=list)

    def aggregate(self, t: int, pool: Iterable[int], global_model: np.ndarray) -> np.ndarray:
        pool = sorted(set(pool))
        self.access_log.append(("sum", t, tuple(pool)))
        updates = [self.engine._local_model(i, global_model, t) for i in pool]
        return secure_aggregate(updates)


class FLEngine:
    """Clients, their datasets and the sum-only oracle."""

    def __init__(self, cfg: TaskConfig, colluders: Iterable[int] = ()):
        self.cfg = cfg
        self._data: dict[int, ClientDataset] = {}
        self.colluders = frozenset(colluders)
        self.oracle = SumOracle(self)
        self.reveal_log: list = []
        self._local_calls: list = []

    def dataset(self, cid: int) -> ClientDataset:
        """Client data, generated on first use (regenerable from the seed)."""
        if not 0 <= cid < self.cfg.n_clients:
            raise FLError(f"no client {cid}")
        if cid not in self._data:
            self._data[cid] = make_dataset(self.cfg, cid)
        return self._data[cid]

    @property
    def datasets(self) -> list[ClientDataset]:
        return [self.dataset(i) for i in range(self.cfg.n_clients)]

    @property
    def d(self) -> int:
        return self.cfg.d

    def initial_model(self) -> np.ndarray:
        return np.zeros(self.cfg.d)

    def _local_model(self, cid: int, global_model: np.ndarray, t: int) -> np.ndarray:
        self._local_calls.append((cid, t))
        cfg = self.cfg
        return local_train(global_model, self.dataset(cid), cfg.epochs, cfg.lr, seed=t,
                           stochastic=cfg.stochastic, batch_size=cfg.batch_size)

    def reveal(self, cid: int, global_model: np.ndarray, t: int) -> np.ndarray:
        """A colluding client hands its own local model to the server."""
        if cid not in self.colluders:
            raise PermissionError(f"client {cid} is not a declared colluder")
        self.reveal_log.append((cid, t))
        return self._local_model(cid, global_model, t)

    def true_update(self, cid: int, global_model: np.ndarray, t: int) -> np.ndarray:
        """Ground truth for scoring attacks; never called by attack code paths."""
        cfg = self.cfg
        return local_train(global_model, self.dataset(cid), cfg.epochs, cfg.lr, seed=t,
                           stochastic=cfg.stochastic, batch_size=cfg.batch_size)

    def global_loss(self, w: np.ndarray) -> float:
        return float(np.mean([loss(w, ds) for ds in self.datasets]))


def fedavg_round(pool: Sequence[int], global_model: np.ndarray, engine: FLEngine, t: int = 0
                 ) -> tuple[np.ndarray, AggregationTranscript]:
    if len(pool) == 0:
        raise FLError("empty pool")
    s = engine.oracle.aggregate(t, pool, global_model)
    nxt = s / len(set(pool))
    return nxt, AggregationTranscript(t, tuple(sorted(set(pool))), s, nxt)


def train(engine: FLEngine, rounds: int, pool_size: int, seed: int = 0,
          global_model: Optional[np.ndarray] = None) -> tuple[np.ndarray, list[float]]:
    """Plain FedAvg with uniformly random pools; returns the model and loss curve."""
    rng = np.random.default_rng([seed, 7])
    w = engine.initial_model() if global_model is None else np.array(global_model, dtype=float)
    curve = [engine.global_loss(w)]
    for t in range(rounds):
        pool = sorted(int(x) for x in rng.choice(engine.cfg.n_clients, size=pool_size, replace=False))
        w, _ = fedavg_round(pool, w, engine, t)
        curve.append(engine.global_loss(w))
    return w, curve


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0 or nb == 0:
        return 0.0 if na != nb else 1.0
    return float(a @ b / (na * nb))


def halving_iterations(lr: float, curvature: float) -> int:
    """GD steps after which the distance to the optimum of a 1-D quadratic halves."""
    rate = abs(1 - lr * curvature)
    if rate >= 1:
        raise FLError("step size does not contract")
    if rate == 0:
        return 1
    return max(1, math.ceil(math.log(0.5) / math.log(rate)))
