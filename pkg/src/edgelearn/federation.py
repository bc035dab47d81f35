"""Simulated federation: partitioning, FedAvg, and (continual) training rounds.

A round is a barrier-synchronised superstep. Client work only reads shared
inputs and writes client-owned state, so it may run on an executor; every
cross-client reduction happens afterwards in ascending client-id order,
which keeps parallel and sequential runs bit-identical.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from edgelearn.models import LabeledDataset, LossKind, ModelSpec, gd_step, loss_pred
from edgelearn.replay import EndOfStream, ReplayBuffer, Stream, cl_train_step
from edgelearn.rng import substream

log = logging.getLogger(__name__)

Weighting = Literal["uniform", "samples"]


def partition_dataset(
    data: LabeledDataset,
    n_clients: int,
    scheme: Literal["iid", "dirichlet", "shard"] = "iid",
    seed: int = 0,
    alpha: float = 1.0,
    shards_per_client: int = 2,
    max_tries: int = 100,
) -> list[LabeledDataset]:
    """Split ``data`` into ``n_clients`` disjoint, covering shards.

    Rows inside each shard keep their original relative order.
    """
    n = len(data)
    if n_clients < 1:
        raise ValueError("need at least one client")
    if n < n_clients:
        raise ValueError(f"cannot split {n} rows over {n_clients} clients")
    rng = substream(seed, "partition", scheme)
    if scheme == "iid":
        parts = np.array_split(rng.permutation(n), n_clients)
    elif scheme == "dirichlet":
        if data.task != "classification":
            raise ValueError("dirichlet partitioning needs class labels")
        if alpha <= 0:
            raise ValueError("alpha must be > 0")
        for _ in range(max_tries):
            buckets = [[] for _ in range(n_clients)]
            for c in range(data.n_classes):
                idx = rng.permutation(np.nonzero(data.labels == c)[0])
                props = rng.dirichlet(np.full(n_clients, alpha))
                cuts = (np.cumsum(props)[:-1] * idx.size).astype(int)
                for k, chunk in enumerate(np.split(idx, cuts)):
                    buckets[k].extend(chunk.tolist())
            if all(buckets):
                break
        else:
            raise RuntimeError(f"dirichlet(alpha={alpha}) left a client empty after {max_tries} draws")
        parts = [np.array(b) for b in buckets]
    elif scheme == "shard":
        # rows are ordered by label (class id or regression target) before sharding
        n_shards = n_clients * shards_per_client
        if n_shards > n:
            raise ValueError("more shards than rows")
        order = np.argsort(data.labels, kind="stable")
        shards = np.array_split(order, n_shards)
        assign = rng.permutation(n_shards).reshape(n_clients, shards_per_client)
        parts = [np.concatenate([shards[s] for s in row]) for row in assign]
    else:
        raise ValueError(f"unknown partition scheme {scheme!r}")
    return [data.subset(np.sort(p)) for p in parts]


def fedavg_aggregate(params_list: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Weighted average with weights normalised to sum to one, summed in list order."""
    if not params_list:
        raise ValueError("nothing to aggregate")
    if len(weights) != len(params_list):
        raise ValueError("need one weight per parameter vector")
    shape = np.shape(params_list[0])
    if any(np.shape(p) != shape for p in params_list):
        raise ValueError("parameter vectors differ in length")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    total = w.sum()
    if total <= 0:
        raise ValueError("weights must not all be zero")
    out = np.zeros(shape)
    for wi, p in zip(w / total, params_list):
        out = out + wi * np.asarray(p, dtype=np.float64)
    return out


@dataclass
class ClientState:
    id: int
    data: LabeledDataset | None = None
    stream: Stream | None = None
    buffer: ReplayBuffer | None = None
    params: np.ndarray | None = None
    seed: int = 0

    def rng(self, *keys) -> np.random.Generator:
        return substream(self.seed, "client", self.id, *keys)


@dataclass(frozen=True)
class RoundReport:
    round: int
    params: np.ndarray = field(repr=False)
    client_losses: tuple[float, ...]
    comm_cost: float = 0.0
    objective: float = float("nan")
    included: tuple[int, ...] = ()
    warnings: tuple[str, ...] = ()
    extra: dict = field(default_factory=dict)


def _weights(sizes: Sequence[int], weighting: Weighting) -> list[float]:
    if weighting == "samples":
        return [float(s) for s in sizes]
    if weighting == "uniform":
        return [1.0] * len(sizes)
    raise ValueError(f"unknown weighting {weighting!r}")


def _map(executor, fn, items):
    return list(executor.map(fn, items)) if executor is not None else [fn(i) for i in items]


def local_train(spec: ModelSpec, params: np.ndarray, data: LabeledDataset, steps: int, lr: float, loss: LossKind):
    """``steps`` full-batch gradient steps; returns (params, loss at the first step)."""
    first = None
    for _ in range(steps):
        ev = loss_pred(spec, params, data, loss)
        first = ev.loss if first is None else first
        params = gd_step(params, ev.gradient, lr)
    return params, first


def fl_round(
    params: np.ndarray,
    clients: Sequence[ClientState],
    spec: ModelSpec,
    local_steps: int = 1,
    lr: float = 0.1,
    weighting: Weighting = "samples",
    loss: LossKind = "cross_entropy",
    round_index: int = 0,
    executor=None,
) -> RoundReport:
    """Broadcast, ``local_steps`` of local full-batch GD per client, FedAvg."""
    if local_steps < 1:
        raise ValueError("local_steps must be >= 1")
    live = sorted((c for c in clients if c.data is not None and len(c.data)), key=lambda c: c.id)
    warnings = tuple(f"client {c.id} has no data and was excluded" for c in clients if c not in live)
    if not live:
        raise ValueError("no client holds any data")
    results = _map(executor, lambda c: local_train(spec, params, c.data, local_steps, lr, loss), live)
    new = fedavg_aggregate([r[0] for r in results], _weights([len(c.data) for c in live], weighting))
    return RoundReport(round_index, new, tuple(r[1] for r in results), included=tuple(c.id for c in live), warnings=warnings)


def fcl_round(
    params: np.ndarray,
    clients: Sequence[ClientState],
    spec: ModelSpec,
    t: int,
    beta: float,
    lr: float,
    replay_batch: int = 10,
    weighting: Weighting = "samples",
    loss: LossKind = "cross_entropy",
    executor=None,
) -> RoundReport:
    """Federated continual-learning step ``t``.

    Every client pulls its batch for step ``t``, takes one mixed-loss step
    from the global parameters against its own buffer, then offers the batch
    to that buffer. The server averages the resulting parameters.
    """
    ordered = sorted(clients, key=lambda c: c.id)

    def work(c: ClientState):
        try:
            batch = c.stream.next_batch(t)
        except EndOfStream:
            return None
        return len(batch), cl_train_step(spec, params, batch, c.buffer, beta, lr, replay_batch, c.rng("fcl", t), t, loss)

    results = _map(executor, work, ordered)
    live = [(c, r) for c, r in zip(ordered, results) if r is not None]
    warnings = tuple(f"client {c.id} reached the end of its stream and was excluded" for c, r in zip(ordered, results) if r is None)
    for w in warnings:
        log.warning(w)
    if not live:
        raise EndOfStream("every client stream has ended")
    new = fedavg_aggregate([r[1].params for _, r in live], _weights([r[0] for _, r in live], weighting))
    return RoundReport(t, new, tuple(r[1].loss for _, r in live), included=tuple(c.id for c, _ in live), warnings=warnings)
