"""Online continual learning with replay buffers.

A :class:`Stream` emits labelled batches whose class mix follows a piecewise
constant schedule. A :class:`ReplayBuffer` keeps a bounded subset of what
it has seen under one of three admission policies:

``rs``
    reservoir sampling: a uniform sample of everything seen so far.
``cbrs``
    class-balancing reservoir sampling: evictions come from the currently
    largest stored class, so rare classes are protected.
``klrs``
    greedy KL matching: each arrival triggers whichever action (ignore, or
    insert while evicting from some stored class) leaves the stored class
    histogram closest in KL divergence to a target mixing the uniform
    distribution with the empirical class distribution of the stream.

Training on a step mixes the loss on the fresh batch with the loss on a
replay sample, ``beta * L_batch + (1 - beta) * L_replay``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Literal, NamedTuple, Sequence

import numpy as np

from edgelearn.models import GradEval, LabeledDataset, LossKind, ModelSpec, accuracy, gd_step, loss_pred
from edgelearn.rng import substream

Policy = Literal["rs", "cbrs", "klrs"]


class EndOfStream(Exception):
    """Raised when a step index lies past the end of the schedule."""


@dataclass(frozen=True)
class Phase:
    duration: int
    probs: tuple[float, ...]


@dataclass(frozen=True)
class StreamConfig:
    n_classes: int
    phases: tuple[Phase, ...]
    batch_size: int
    means: np.ndarray  # (n_classes, d) class-conditional Gaussian centres
    scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        if means.ndim != 2 or means.shape[0] != self.n_classes:
            raise ValueError("means must have one row per class")
        object.__setattr__(self, "means", means)
        phases = tuple(p if isinstance(p, Phase) else Phase(int(p[0]), tuple(p[1])) for p in self.phases)
        if not phases:
            raise ValueError("at least one phase is required")
        for p in phases:
            if p.duration < 1:
                raise ValueError("phase durations must be >= 1")
            if len(p.probs) != self.n_classes or min(p.probs) < 0:
                raise ValueError("phase probabilities must be a distribution over the classes")
            if abs(math.fsum(p.probs) - 1.0) > 1e-12:
                raise ValueError(f"phase probabilities sum to {math.fsum(p.probs)!r}, not 1")
        object.__setattr__(self, "phases", phases)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.scale <= 0:
            raise ValueError("scale must be > 0")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def length(self) -> int:
        return sum(p.duration for p in self.phases)


class Stream:
    """Deterministic batch source; step ``t`` (0-based) always yields the same batch."""

    def __init__(self, config: StreamConfig, stream_id: int | str = 0):
        self.config = config
        self.stream_id = stream_id

    def __len__(self):
        return self.config.length

    def phase_at(self, t: int) -> Phase:
        if t < 0:
            raise ValueError("step index must be >= 0")
        for p in self.config.phases:
            if t < p.duration:
                return p
            t -= p.duration
        raise EndOfStream(f"stream {self.stream_id!r} ended")

    def sample_class(self, label: int, n: int, rng: np.random.Generator) -> np.ndarray:
        cfg = self.config
        return cfg.means[label] + cfg.scale * rng.standard_normal((n, cfg.dim))

    def next_batch(self, t: int) -> LabeledDataset:
        phase = self.phase_at(t)
        cfg = self.config
        rng = substream(cfg.seed, "stream", self.stream_id, t)
        y = rng.choice(cfg.n_classes, size=cfg.batch_size, p=np.asarray(phase.probs))
        X = cfg.means[y] + cfg.scale * rng.standard_normal((cfg.batch_size, cfg.dim))
        return LabeledDataset(X, y, "classification", cfg.n_classes)

    def held_out(self, per_class: int) -> list[LabeledDataset]:
        """A fixed test set per class, independent of the training batches."""
        cfg = self.config
        out = []
        for c in range(cfg.n_classes):
            rng = substream(cfg.seed, "held-out", self.stream_id, c)
            X = self.sample_class(c, per_class, rng)
            out.append(LabeledDataset(X, np.full(per_class, c), "classification", cfg.n_classes))
        return out


def stream_next(stream: Stream, t: int) -> LabeledDataset:
    return stream.next_batch(t)


class UpdateResult(NamedTuple):
    action: Literal["insert", "replace", "ignore"]
    evicted_class: int | None = None
    evicted: tuple[np.ndarray, int, int] | None = None  # (x, y, arrival step)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) with the 0 * log 0 = 0 convention."""
    mask = p > 0
    if np.any(q[mask] <= 0):
        return math.inf
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


class ReplayBuffer:
    """Capacity-bounded example store with per-class bookkeeping."""

    def __init__(self, capacity: int, dim: int, n_classes: int, policy: Policy = "rs", tau: float = 0.5):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        if policy not in ("rs", "cbrs", "klrs"):
            raise ValueError(f"unknown buffer policy {policy!r}")
        if not 0.0 <= tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        self.capacity = capacity
        self.dim = dim
        self.n_classes = n_classes
        self.policy = policy
        self.tau = tau
        self.X = np.zeros((capacity, dim))
        self.y = np.zeros(capacity, dtype=np.int64)
        self.born = np.zeros(capacity, dtype=np.int64)
        self.size = 0
        self.stored_counts = np.zeros(n_classes, dtype=np.int64)
        self.seen_counts = np.zeros(n_classes, dtype=np.int64)
        self.total_seen = 0

    def __len__(self):
        return self.size

    @property
    def full(self) -> bool:
        return self.size >= self.capacity

    @property
    def headroom(self) -> int:
        return self.capacity - self.size

    def as_dataset(self) -> LabeledDataset:
        return LabeledDataset(self.X[:self.size].copy(), self.y[:self.size].copy(), "classification", self.n_classes)

    def sample(self, n: int, rng: np.random.Generator) -> LabeledDataset:
        """Uniform sample without replacement of ``min(n, len(self))`` items."""
        k = min(n, self.size)
        idx = np.sort(rng.choice(self.size, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)
        return LabeledDataset(self.X[idx], self.y[idx], "classification", self.n_classes)

    def class_indices(self, c: int) -> np.ndarray:
        return np.nonzero(self.y[:self.size] == c)[0]

    def _append(self, x, y: int, step: int):
        i = self.size
        self.X[i], self.y[i], self.born[i] = x, y, step
        self.size += 1
        self.stored_counts[y] += 1

    def _replace(self, slot: int, x, y: int, step: int) -> UpdateResult:
        old = (self.X[slot].copy(), int(self.y[slot]), int(self.born[slot]))
        self.stored_counts[old[1]] -= 1
        self.X[slot], self.y[slot], self.born[slot] = x, y, step
        self.stored_counts[y] += 1
        return UpdateResult("replace", old[1], old)

    def _check(self):
        assert self.size <= self.capacity, "buffer over capacity"
        assert int(self.stored_counts.sum()) == self.size

    def admit(self, x, y: int, step: int = 0):
        """Store an item handed over by another node; needs free space."""
        if self.full:
            raise ValueError("admit() needs buffer headroom")
        self.seen_counts[y] += 1
        self.total_seen += 1
        self._append(x, int(y), step)

    def target_distribution(self) -> np.ndarray:
        seen = self.seen_counts / max(self.total_seen, 1)
        return self.tau / self.n_classes + (1.0 - self.tau) * seen

    def klrs_actions(self, y: int):
        """Candidate actions for a full buffer and the histogram each one yields."""
        base = self.stored_counts.astype(np.float64)
        out = [("ignore", None, base / self.size)]
        for c in range(self.n_classes):
            if self.stored_counts[c] == 0:
                continue
            h = base.copy()
            h[c] -= 1
            h[y] += 1
            out.append(("replace", c, h / self.size))
        return out

    def update(self, x, y: int, rng: np.random.Generator, step: int = 0, can_store: bool = True) -> UpdateResult:
        """Offer one arriving example; ``can_store=False`` records it as seen only."""
        y = int(y)
        if not 0 <= y < self.n_classes:
            raise ValueError(f"label {y} out of range")
        self.seen_counts[y] += 1
        self.total_seen += 1
        if self.capacity == 0 or not can_store:
            return UpdateResult("ignore")
        if not self.full:
            self._append(x, y, step)
            self._check()
            return UpdateResult("insert")
        res = getattr(self, f"_update_{self.policy}")(x, y, rng, step)
        self._check()
        return res

    def update_many(self, X, y, rng: np.random.Generator, step: int = 0) -> int:
        """Offer a block of arrivals in order; returns how many were stored.

        For ``rs`` the eviction slots of the whole block come from a single
        vectorised draw (same B/t law as repeated :meth:`update`, different
        random stream). Other policies fall back to per-item updates.
        """
        y = np.asarray(y, dtype=np.int64)
        X = np.asarray(X, dtype=np.float64).reshape(y.size, self.dim)
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError("label out of range")
        if self.policy != "rs":
            return sum(self.update(X[i], y[i], rng, step).action != "ignore" for i in range(y.size))
        fill = min(self.capacity - self.size, y.size)
        if fill:
            sl = slice(self.size, self.size + fill)
            self.X[sl], self.y[sl], self.born[sl] = X[:fill], y[:fill], step
            self.size += fill
            self.stored_counts += np.bincount(y[:fill], minlength=self.n_classes)
        self.seen_counts += np.bincount(y[:fill], minlength=self.n_classes)
        self.total_seen += fill
        rest = y.size - fill
        stored = fill
        if rest and self.capacity:
            j = rng.integers(0, self.total_seen + np.arange(1, rest + 1))
            for h in np.nonzero(j < self.capacity)[0]:
                self._replace(int(j[h]), X[fill + h], int(y[fill + h]), step)
                stored += 1
        self.seen_counts += np.bincount(y[fill:], minlength=self.n_classes)
        self.total_seen += rest
        self._check()
        return stored

    def _update_rs(self, x, y, rng, step):
        j = int(rng.integers(0, self.total_seen))
        if j < self.capacity:
            return self._replace(j, x, y, step)
        return UpdateResult("ignore")

    def _update_cbrs(self, x, y, rng, step):
        largest = self.stored_counts.max()
        if self.stored_counts[y] != largest:
            pool = np.nonzero(np.isin(self.y[:self.size], np.nonzero(self.stored_counts == largest)[0]))[0]
            return self._replace(int(rng.choice(pool)), x, y, step)
        if rng.random() < self.stored_counts[y] / self.seen_counts[y]:
            return self._replace(int(rng.choice(self.class_indices(y))), x, y, step)
        return UpdateResult("ignore")

    def _update_klrs(self, x, y, rng, step):
        q = self.target_distribution()
        best, best_kl = None, math.inf
        for action, c, hist in self.klrs_actions(y):
            kl = kl_divergence(hist, q)
            if best is None or kl < best_kl:
                best, best_kl = (action, c), kl
        if best[0] == "ignore":
            return UpdateResult("ignore")
        return self._replace(int(rng.choice(self.class_indices(best[1]))), x, y, step)

    def age_histogram(self, now: int, bins: Sequence[int] = (1, 5, 20, 100)) -> list[int]:
        """Counts of stored items by age ``now - arrival`` over ``[0,b0), [b0,b1), ..., [b_last, inf)``."""
        ages = now - self.born[:self.size]
        edges = [0, *bins, np.iinfo(np.int64).max]
        return [int(np.sum((ages >= lo) & (ages < hi))) for lo, hi in zip(edges[:-1], edges[1:])]

    def snapshot(self) -> str:
        """Byte-stable JSON dump of the full buffer state."""
        state = {
            "policy": self.policy,
            "capacity": self.capacity,
            "tau": self.tau,
            "total_seen": self.total_seen,
            "seen_counts": self.seen_counts.tolist(),
            "stored_counts": self.stored_counts.tolist(),
            "items": [
                {"x": self.X[i].tolist(), "y": int(self.y[i]), "step": int(self.born[i])} for i in range(self.size)
            ],
        }
        return json.dumps(state, sort_keys=True)


def buffer_update(buffer: ReplayBuffer, x, y: int, rng: np.random.Generator, step: int = 0) -> UpdateResult:
    return buffer.update(x, y, rng, step)


def combined_loss(
    spec: ModelSpec,
    params: np.ndarray,
    batch: LabeledDataset,
    replay: LabeledDataset | None,
    beta: float,
    loss: LossKind = "cross_entropy",
) -> GradEval:
    """``beta * L(batch) + (1 - beta) * L(replay)``; an empty replay forces beta = 1."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    if len(batch) == 0:
        raise ValueError("the fresh batch must not be empty")
    cur = loss_pred(spec, params, batch, loss)
    if replay is None or len(replay) == 0 or beta == 1.0:
        return cur
    old = loss_pred(spec, params, replay, loss)
    return GradEval(beta * cur.loss + (1.0 - beta) * old.loss, beta * cur.gradient + (1.0 - beta) * old.gradient)


class CLStep(NamedTuple):
    params: np.ndarray
    loss: float
    replayed: int
    updates: tuple[UpdateResult, ...]


def cl_train_step(
    spec: ModelSpec,
    params: np.ndarray,
    batch: LabeledDataset,
    buffer: ReplayBuffer | None,
    beta: float,
    lr: float,
    replay_batch: int,
    rng: np.random.Generator,
    step: int = 0,
    loss: LossKind = "cross_entropy",
    update_first: bool = False,
) -> CLStep:
    """One gradient step on the mixed loss plus the buffer updates for ``batch``.

    By default the model trains against the buffer as it stood before this
    batch arrived, then the batch is offered to the buffer. ``update_first``
    flips the order.
    """
    def offer():
        if buffer is None:
            return ()
        return tuple(buffer.update(batch.features[i], batch.labels[i], rng, step) for i in range(len(batch)))

    updates = offer() if update_first else ()
    replay = buffer.sample(replay_batch, rng) if buffer is not None and replay_batch > 0 else None
    ev = combined_loss(spec, params, batch, replay, beta, loss)
    new_params = gd_step(params, ev.gradient, lr)
    if not update_first:
        updates = offer()
    return CLStep(new_params, ev.loss, 0 if replay is None else len(replay), updates)


@dataclass
class CLMetrics:
    accuracy: np.ndarray  # (checkpoints, classes)
    final_average: float
    forgetting: np.ndarray  # per class

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy.tolist(),
            "final_average": self.final_average,
            "forgetting": self.forgetting.tolist(),
        }


def eval_forgetting(spec: ModelSpec, checkpoints: Sequence[np.ndarray], held_out: Sequence[LabeledDataset]) -> CLMetrics:
    """Per-class accuracy trajectories and ``max-over-history - final`` forgetting."""
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    acc = np.array([[accuracy(spec, p, d) for d in held_out] for p in checkpoints])
    return CLMetrics(acc, float(acc[-1].mean()), acc.max(axis=0) - acc[-1])


@dataclass
class CLRun:
    params: np.ndarray
    checkpoints: list[np.ndarray] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)


def run_stream(
    spec: ModelSpec,
    params: np.ndarray,
    stream: Stream,
    buffer: ReplayBuffer | None,
    beta: float,
    lr: float,
    replay_batch: int,
    seed: int,
    checkpoint_every: int = 1,
    beta_end: float | None = None,
) -> CLRun:
    """Drive :func:`cl_train_step` over a whole stream.

    ``beta_end`` enables a linear schedule from ``beta`` to ``beta_end``.
    """
    run = CLRun(params, [params.copy()])
    T = len(stream)
    for t in range(T):
        b = beta if beta_end is None or T == 1 else beta + (beta_end - beta) * t / (T - 1)
        res = cl_train_step(spec, run.params, stream.next_batch(t), buffer, b, lr, replay_batch,
                            substream(seed, "cl-step", stream.stream_id, t), step=t)
        run.params = res.params
        run.losses.append(res.loss)
        if (t + 1) % checkpoint_every == 0 or t == T - 1:
            run.checkpoints.append(run.params.copy())
    return run
