"""Client graph, data-transfer accounting and replay-buffer placement policies.

Data moved between nodes is metered as ``samples x least-cost path cost``.
Edges are undirected with a per-step capacity in samples shared by both
directions. Routing picks the least-cost path; among equal-cost paths the
lexicographically smallest vertex sequence wins.

The loss/communication trade-off evaluated here is, summed over steps ``t``
and clients ``i``::

    lam * L_i,t  +  (1 - lam) * cost_i,t

where ``L_i,t`` is the mixed replay loss the client trained on at step ``t``
and ``cost_i,t`` is the transfer cost attributed to that client. Each
transfer is attributed to its ``owner``: the sender for pushes and
client-to-client hand-offs, the receiving client for pulls from the server.
"""
from __future__ import annotations

import heapq
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np

from edgelearn.federation import ClientState, RoundReport, Weighting, _weights, fedavg_aggregate
from edgelearn.models import LossKind, ModelSpec, gd_step
from edgelearn.replay import EndOfStream, ReplayBuffer, combined_loss
from edgelearn.rng import substream

log = logging.getLogger(__name__)

PlacementPolicy = Literal["local-only", "offload-overflow", "shared-buffer"]
POLICIES = ("local-only", "offload-overflow", "shared-buffer")


class RoutingError(ValueError):
    pass


class CapacityError(ValueError):
    def __init__(self, edge: tuple[int, int], step: int, load: float, capacity: float):
        super().__init__(f"edge {edge} carries {load} samples at step {step}, capacity is {capacity}")
        self.edge = edge
        self.step = step


@dataclass(frozen=True)
class Link:
    cost: float
    capacity: float = math.inf

    def __post_init__(self):
        if not (math.isfinite(self.cost) and self.cost >= 0):
            raise ValueError("link cost must be finite and >= 0")
        if self.capacity < 0:
            raise ValueError("link capacity must be >= 0")


def _edge(u: int, v: int) -> tuple[int, int]:
    return (u, v) if u < v else (v, u)


class Topology:
    """Undirected graph over clients ``0..n_clients-1`` plus an optional server vertex."""

    def __init__(self, n_clients: int, edges: Mapping[tuple[int, int], Link | tuple | float], server: int | None = None):
        self.n_clients = n_clients
        self.server = server
        n_vertices = n_clients + (1 if server is not None else 0)
        if server is not None and server != n_clients:
            raise ValueError("the server vertex must be numbered n_clients")
        self.vertices = tuple(range(n_vertices))
        self.links: dict[tuple[int, int], Link] = {}
        for (u, v), link in edges.items():
            if u == v or not (0 <= u < n_vertices and 0 <= v < n_vertices):
                raise ValueError(f"bad edge ({u}, {v})")
            if not isinstance(link, Link):
                link = Link(*link) if isinstance(link, tuple) else Link(float(link))
            self.links[_edge(u, v)] = link
        self._adj: dict[int, list[int]] = defaultdict(list)
        for u, v in sorted(self.links):
            self._adj[u].append(v)
            self._adj[v].append(u)
        for v in self._adj:
            self._adj[v].sort()
        self._routes: dict[tuple[int, int], tuple[float, tuple[int, ...]]] = {}

    def neighbors(self, v: int) -> list[int]:
        return list(self._adj.get(v, []))

    def link(self, u: int, v: int) -> Link:
        return self.links[_edge(u, v)]

    def route(self, src: int, dst: int) -> tuple[float, tuple[int, ...]]:
        """Least-cost path ``(cost, vertices)``; ties go to the lexicographically smallest path."""
        key = (src, dst)
        if key in self._routes:
            return self._routes[key]
        if src not in self.vertices or dst not in self.vertices:
            raise RoutingError(f"unknown endpoint in ({src}, {dst})")
        heap = [(0.0, (src,))]
        done = set()
        while heap:
            cost, path = heapq.heappop(heap)
            v = path[-1]
            if v in done:
                continue
            done.add(v)
            if v == dst:
                self._routes[key] = (cost, path)
                return cost, path
            for w in self._adj.get(v, []):
                if w not in done:
                    heapq.heappush(heap, (cost + self.link(v, w).cost, path + (w,)))
        raise RoutingError(f"no route between {src} and {dst}")

    def path_cost(self, src: int, dst: int) -> float:
        return self.route(src, dst)[0]

    def is_connected(self) -> bool:
        try:
            for v in self.vertices[1:]:
                self.route(0, v)
        except RoutingError:
            return False
        return True


@dataclass(frozen=True)
class Transfer:
    step: int
    src: int
    dst: int
    count: int
    owner: int


@dataclass(frozen=True)
class PlacementDecision:
    """What one client did at one step."""

    client: int
    step: int
    processed: int  # examples trained on: fresh batch plus replay
    sent: tuple[Transfer, ...] = ()  # transfers owned by this client
    received: int = 0


def transfer_load(transfers: Iterable[Transfer], topology: Topology) -> dict[tuple[tuple[int, int], int], int]:
    load: dict = defaultdict(int)
    for tr in transfers:
        _, path = topology.route(tr.src, tr.dst)
        for u, v in zip(path, path[1:]):
            load[(_edge(u, v), tr.step)] += tr.count
    return load


def comm_cost_by_client(decisions: Iterable[PlacementDecision], topology: Topology) -> dict[tuple[int, int], float]:
    """Transfer cost per ``(step, client)``; raises on unroutable or over-capacity traffic."""
    decisions = list(decisions)
    transfers = [tr for d in decisions for tr in d.sent]
    for (edge, step), n in sorted(transfer_load(transfers, topology).items()):
        cap = topology.links[edge].capacity
        if n > cap:
            raise CapacityError(edge, step, n, cap)
    out: dict[tuple[int, int], float] = defaultdict(float)
    for d in decisions:
        out[(d.step, d.client)] += 0.0
    for tr in transfers:
        out[(tr.step, tr.owner)] += tr.count * topology.path_cost(tr.src, tr.dst)
    return dict(out)


def comm_cost(decisions: Iterable[PlacementDecision], topology: Topology) -> float:
    per = comm_cost_by_client(decisions, topology)
    return math.fsum(per[k] for k in sorted(per))


def distributed_cl_objective(
    losses: Mapping[tuple[int, int], float],
    decisions: Iterable[PlacementDecision],
    topology: Topology,
    lam: float,
) -> float:
    """``sum over (step, client) of lam * loss + (1 - lam) * cost``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must lie in [0, 1], got {lam}")
    cost = comm_cost_by_client(decisions, topology)
    keys = sorted(set(losses) | set(cost))
    return math.fsum(lam * losses.get(k, 0.0) + (1.0 - lam) * cost.get(k, 0.0) for k in keys)


class _CapacityLedger:
    """Per-step edge usage so policies never exceed link capacities."""

    def __init__(self, topology: Topology):
        self.topology = topology
        self.used: dict[tuple[int, int], int] = defaultdict(int)

    def room(self, src: int, dst: int) -> float:
        _, path = self.topology.route(src, dst)
        return min(self.topology.links[_edge(u, v)].capacity - self.used[_edge(u, v)] for u, v in zip(path, path[1:]))

    def reserve(self, src: int, dst: int, count: int) -> int:
        """Reserve up to ``count`` samples along the route; returns the amount granted."""
        granted = int(max(0, min(count, self.room(src, dst))))
        _, path = self.topology.route(src, dst)
        for u, v in zip(path, path[1:]):
            self.used[_edge(u, v)] += granted
        return granted


@dataclass
class PlacementRun:
    policy: str
    reports: list[RoundReport]
    decisions: list[PlacementDecision]
    losses: dict[tuple[int, int], float]
    objective: float
    total_cost: float
    params: np.ndarray = field(repr=False)


def _merge(transfers: list[Transfer]) -> tuple[Transfer, ...]:
    acc: dict = defaultdict(int)
    for tr in transfers:
        acc[(tr.step, tr.src, tr.dst, tr.owner)] += tr.count
    return tuple(Transfer(s, a, b, n, o) for (s, a, b, o), n in sorted(acc.items()) if n > 0)


def run_placement_policy(
    policy: PlacementPolicy,
    clients: Sequence[ClientState],
    topology: Topology,
    spec: ModelSpec,
    params: np.ndarray,
    steps: int,
    lam: float,
    beta: float = 0.5,
    lr: float = 0.1,
    replay_batch: int = 10,
    server_capacity: int = 0,
    weighting: Weighting = "samples",
    loss: LossKind = "cross_entropy",
    seed: int = 0,
) -> PlacementRun:
    """Simulate ``steps`` federated continual-learning steps under one buffer architecture.

    ``local-only``
        every client replays from and updates its own buffer; nothing moves.
    ``offload-overflow``
        as above, but an item a full local buffer would discard is handed to
        the cheapest-to-reach neighbouring client that still has buffer room
        (and link capacity), if any.
    ``shared-buffer``
        a single reservoir buffer lives on the server vertex. Each step every
        client pulls a uniform replay batch from it and, after training,
        pushes exactly those fresh examples the server reservoir admits.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown placement policy {policy!r}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must lie in [0, 1], got {lam}")
    ordered = sorted(clients, key=lambda c: c.id)
    ids = [c.id for c in ordered]
    if ids != list(range(topology.n_clients)):
        raise ValueError("client ids must be 0..n_clients-1 matching the topology")
    server_buf = None
    if policy == "shared-buffer":
        if topology.server is None:
            raise ValueError("shared-buffer mode needs a server vertex")
        if not topology.is_connected():
            raise ValueError("shared-buffer mode needs a connected topology")
        first = ordered[0].stream.config
        server_buf = ReplayBuffer(server_capacity, first.dim, first.n_classes, "rs")
    srv = topology.server

    reports, decisions = [], []
    losses: dict[tuple[int, int], float] = {}
    total_obj, total_cost = [], []
    for t in range(steps):
        ledger = _CapacityLedger(topology)
        sent: dict[int, list[Transfer]] = defaultdict(list)
        received: dict[int, int] = defaultdict(int)
        step_cost: dict[int, float] = defaultdict(float)

        def meter(src, dst, count, owner):
            if count <= 0:
                return
            sent[owner].append(Transfer(t, src, dst, count, owner))
            step_cost[owner] += count * topology.path_cost(src, dst)

        # pulls happen before local training
        pulled = {}
        if server_buf is not None:
            for c in ordered:
                want = min(replay_batch, len(server_buf))
                got = ledger.reserve(srv, c.id, want)
                pulled[c.id] = server_buf.sample(got, substream(seed, "pull", c.id, t))
                meter(srv, c.id, got, c.id)
                received[c.id] += got

        live, results = [], []
        for c in ordered:
            try:
                batch = c.stream.next_batch(t)
            except EndOfStream:
                continue
            rng = c.rng("place", t)
            if server_buf is not None:
                replay = pulled[c.id]
                updates = ()
            else:
                replay = c.buffer.sample(replay_batch, rng) if replay_batch > 0 else None
            ev = combined_loss(spec, params, batch, replay, beta, loss)
            new = gd_step(params, ev.gradient, lr)
            if server_buf is None:
                updates = tuple(c.buffer.update(batch.features[i], batch.labels[i], rng, t) for i in range(len(batch)))
            live.append(c)
            results.append((batch, replay, ev.loss, new, updates))
        if not live:
            raise EndOfStream(f"every client stream ended before step {t}")

        # barrier: cross-client effects in client-id order
        for c, (batch, _, _, _, updates) in zip(live, results):
            if policy == "offload-overflow":
                for u in updates:
                    if u.evicted is None:
                        continue
                    x, y, born = u.evicted
                    options = sorted(
                        (topology.path_cost(c.id, j), j) for j in topology.neighbors(c.id)
                        if j < topology.n_clients and ordered[j].buffer.headroom > 0 and ledger.room(c.id, j) >= 1
                    )
                    if options:
                        j = options[0][1]
                        ledger.reserve(c.id, j, 1)
                        ordered[j].buffer.admit(x, y, born)
                        meter(c.id, j, 1, c.id)
                        received[j] += 1
            elif policy == "shared-buffer":
                rng = substream(seed, "push", c.id, t)
                for i in range(len(batch)):
                    can_send = ledger.room(c.id, srv) >= 1
                    res = server_buf.update(batch.features[i], batch.labels[i], rng, t, can_store=can_send)
                    if res.action != "ignore":
                        ledger.reserve(c.id, srv, 1)
                        meter(c.id, srv, 1, c.id)

        step_losses = []
        step_obj = []
        for c, (batch, replay, lval, _, _) in zip(live, results):
            processed = len(batch) + (0 if replay is None else len(replay))
            decisions.append(PlacementDecision(c.id, t, processed, _merge(sent[c.id]), received[c.id]))
            losses[(t, c.id)] = lval
            step_losses.append(lval)
            step_obj.append(lam * lval + (1.0 - lam) * step_cost[c.id])
        # clients that only received data still appear in the log
        for j, n in received.items():
            if j not in {c.id for c in live}:
                decisions.append(PlacementDecision(j, t, 0, _merge(sent[j]), n))

        params = fedavg_aggregate([r[3] for r in results], _weights([len(r[0]) for r in results], weighting))
        cost_t = math.fsum(step_cost.values())
        obj_t = math.fsum(step_obj)
        total_obj.append(obj_t)
        total_cost.append(cost_t)
        extra = {}
        if server_buf is not None:
            extra["buffer_age_histogram"] = server_buf.age_histogram(t)
            extra["buffer_size"] = len(server_buf)
        else:
            extra["buffer_sizes"] = [len(c.buffer) for c in ordered]
        reports.append(RoundReport(t, params, tuple(step_losses), cost_t, obj_t, tuple(c.id for c in live), (), extra))

    return PlacementRun(policy, reports, decisions, losses, math.fsum(total_obj), math.fsum(total_cost), params)
