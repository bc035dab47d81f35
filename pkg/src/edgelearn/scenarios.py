"""Scenario registry.

Each scenario is a generator ``fn(cfg, sink)`` that yields metrics records
(dicts with exactly the scenario's registered columns) and may hand extra
artefacts (tree snapshots, summaries) to ``sink``. Every random draw goes
through :func:`edgelearn.rng.substream` keyed on ``cfg.seed``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from edgelearn.config import ExperimentConfig
from edgelearn.ensemble import Ensemble, Selection, federated_gradient_boost, federated_random_forest, tree_loss
from edgelearn.federation import ClientState, fcl_round, partition_dataset
from edgelearn.models import LabeledDataset, ModelSpec, accuracy, init_params
from edgelearn.network import Link, Topology, distributed_cl_objective, run_placement_policy
from edgelearn.replay import ReplayBuffer, Stream, StreamConfig, eval_forgetting, run_stream
from edgelearn.rng import substream
from edgelearn.synthetic import blobs, circle_means, regression_data, train_test_split
from edgelearn.tree import StoppingCriteria, fit_tree
from edgelearn.xai import MooConfig, bilevel_train, dominates, federated_moo_round, non_dominated, pareto_sweep


class Sink:
    """Collects non-tabular outputs; the runner decides where they go."""

    def __init__(self):
        self.files: dict[str, str] = {}

    def put(self, name: str, text: str) -> None:
        self.files[name] = text

    def put_json(self, name: str, obj) -> None:
        self.files[name] = json.dumps(obj, indent=2, sort_keys=True) + "\n"


@dataclass(frozen=True)
class Scenario:
    name: str
    columns: tuple[str, ...]
    run: Callable[[ExperimentConfig, Sink], Iterator[dict]]
    description: str


REGISTRY: dict[str, Scenario] = {}


def scenario(name: str, columns: tuple[str, ...], description: str):
    def deco(fn):
        REGISTRY[name] = Scenario(name, ("scenario", "seed") + columns, fn, description)
        return fn
    return deco


def _row(cfg: ExperimentConfig, **values) -> dict:
    return {"scenario": cfg.scenario, "seed": cfg.seed, **values}


def _moo_config(cfg: ExperimentConfig) -> MooConfig:
    m = cfg.moo
    return MooConfig(m.outer_iters, m.lr, m.ridge, cfg.seed, "mse", m.client_weighting, m.normalization)


def _regression(cfg: ExperimentConfig) -> LabeledDataset:
    m = cfg.moo
    return regression_data(m.n_samples, m.dim, m.noise, m.nonlinearity, cfg.seed)


def _stopping(cfg: ExperimentConfig, max_depth: int | None = None) -> StoppingCriteria:
    t = cfg.tree
    depth = t.max_depth if max_depth is None else max_depth
    return StoppingCriteria(None if depth == -1 else depth, t.min_samples, t.min_gain)


@scenario("xai-moo-sweep", ("index", "weight", "l_pred", "l_pf", "non_dominated"),
          "scalarized accuracy/fidelity sweep plus a min-norm bilevel run")
def xai_moo_sweep(cfg, sink):
    data = _regression(cfg)
    spec = ModelSpec(cfg.model.arch, data.dim, 1, cfg.model.hidden)
    mcfg = _moo_config(cfg)
    points = pareto_sweep(data, spec, cfg.moo.weights, mcfg)
    front = {id(p) for p in non_dominated(points)}
    for i, p in enumerate(points):
        yield _row(cfg, index=i, weight=p.weight, l_pred=p.l_pred, l_pf=p.l_pf, non_dominated=id(p) in front)
    theta, phi, trace = bilevel_train(data, spec, mcfg)
    last = trace.records[-1] if trace.records else None
    if last is not None:
        bl = (last.l_pred, last.l_pf)
        sink.put_json("summary.json", {
            "bilevel": {"l_pred": last.l_pred, "l_pf": last.l_pf, "alpha": last.alpha,
                        "iterations": len(trace)},
            "bilevel_dominated_by_sweep": any(dominates((p.l_pred, p.l_pf), bl) for p in points),
        })


@scenario("federated-moo", ("round", "l_pred", "l_pf", "alpha", "direction_norm", "pareto_stationary"),
          "federated bilevel accuracy/fidelity training with per-client surrogates")
def federated_moo(cfg, sink):
    data = _regression(cfg)
    f = cfg.federation
    scheme = "iid" if f.scheme == "dirichlet" else f.scheme
    parts = partition_dataset(data, f.clients, scheme, cfg.seed, shards_per_client=f.shards_per_client)
    spec = ModelSpec(cfg.model.arch, data.dim, 1, cfg.model.hidden)
    mcfg = _moo_config(cfg)
    theta = init_params(spec, substream(cfg.seed, "moo-init"))
    for r in range(f.rounds):
        theta, info = federated_moo_round(theta, parts, spec, mcfg, r)
        rec = info.record
        yield _row(cfg, round=r, l_pred=rec.l_pred, l_pf=rec.l_pf, alpha=rec.alpha,
                   direction_norm=rec.direction_norm, pareto_stationary=rec.pareto_stationary)


def _tree_data(cfg):
    t = cfg.tree
    if t.impurity == "mse":
        data = regression_data(t.n_samples, t.n_features, cfg.moo.noise, cfg.moo.nonlinearity, cfg.seed)
    else:
        data = blobs(t.n_samples, t.n_features, t.n_classes, spread=1.0, seed=cfg.seed)
    return train_test_split(data, t.test_fraction, cfg.seed)


@scenario("dtree-central", ("max_depth", "depth", "n_leaves", "train_error", "test_error"),
          "single CART tree over a depth sweep")
def dtree_central(cfg, sink):
    train, test = _tree_data(cfg)
    tree = None
    for d in cfg.tree.depths:
        tree = fit_tree(train, _stopping(cfg, d), cfg.tree.impurity)
        yield _row(cfg, max_depth=d, depth=tree.depth(), n_leaves=sum(1 for _ in tree.leaves()),
                   train_error=tree_loss(tree, train), test_error=tree_loss(tree, test) if len(test) else float("nan"))
    if tree is not None:
        sink.put("tree.json", tree.to_json() + "\n")
        sink.put("rules.txt", "\n".join(tree.rules()) + "\n")


@scenario("federated-forest", ("client", "n_trees", "n_selected", "test_error"),
          "union of client-selected bagged trees")
def federated_forest(cfg, sink):
    t, f = cfg.tree, cfg.federation
    train, test = _tree_data(cfg)
    scheme = f.scheme if train.task == "classification" else "iid"
    parts = partition_dataset(train, f.clients, scheme, cfg.seed, f.alpha, f.shards_per_client)
    fits, vals = [], []
    for k, p in enumerate(parts):
        a, b = train_test_split(p, 0.2, cfg.seed * 1000 + k) if len(p) >= 5 else (p, p)
        fits.append(a)
        vals.append(b if len(b) else a)
    M = len(parts)
    sel = Selection(t.selection, [t.selected_per_client] * M, vals)
    ens = federated_random_forest(fits, [t.trees_per_client] * M, sel, _stopping(cfg), cfg.seed, t.impurity)

    def err(e: Ensemble) -> float:
        pred = e.predict_batch(test.features)
        if test.task == "classification":
            return float(np.mean(pred != test.labels))
        return float(np.mean((pred - test.labels) ** 2))

    for k in range(M):
        own = [m for m in ens.members if m.client == k]
        e = err(Ensemble(own, ens.combiner, n_classes=ens.n_classes)) if own else float("nan")
        yield _row(cfg, client=k, n_trees=t.trees_per_client, n_selected=len(own), test_error=e)
    yield _row(cfg, client=-1, n_trees=t.trees_per_client * M, n_selected=len(ens), test_error=err(ens))
    sink.put("ensemble.json", ens.to_json() + "\n")


@scenario("federated-boost", ("visit", "client", "train_mse", "test_mse"),
          "round-robin federated gradient boosting on a regression task")
def federated_boost(cfg, sink):
    t, f = cfg.tree, cfg.federation
    data = regression_data(t.n_samples, t.n_features, cfg.moo.noise, cfg.moo.nonlinearity, cfg.seed)
    train, test = train_test_split(data, t.test_fraction, cfg.seed)
    scheme = "iid" if f.scheme == "dirichlet" else f.scheme
    parts = partition_dataset(train, f.clients, scheme, cfg.seed, shards_per_client=f.shards_per_client)
    ens = federated_gradient_boost(parts, t.boost_rounds, t.boost_lr, _stopping(cfg))
    for v, m in enumerate(ens.members):
        prefix = Ensemble(ens.members[: v + 1], "boost", ens.base, ens.lr)
        mse_tr = float(np.mean((prefix.predict_batch(train.features) - train.labels) ** 2))
        mse_te = float(np.mean((prefix.predict_batch(test.features) - test.labels) ** 2)) if len(test) else float("nan")
        yield _row(cfg, visit=v, client=m.client, train_mse=mse_tr, test_mse=mse_te)
    sink.put("ensemble.json", ens.to_json() + "\n")


def _stream_config(cfg, probs_for=None) -> StreamConfig:
    s = cfg.stream
    phases = []
    for ph in s.phases:
        p = np.asarray(ph["probs"], dtype=np.float64)
        if probs_for is not None:
            p = probs_for(p)
        phases.append((ph["duration"], tuple(p)))
    return StreamConfig(s.n_classes, tuple(phases), s.batch_size, circle_means(s.n_classes, max(2, s.dim), s.radius),
                        s.scale, cfg.seed)


def _client_classes(k: int, cfg) -> list[int]:
    K, c = cfg.stream.n_classes, cfg.federation.classes_per_client
    return sorted({(k * c + j) % K for j in range(c)})


def _restrict(classes):
    def fn(p):
        q = np.zeros_like(p)
        q[classes] = p[classes]
        if q.sum() <= 0:
            q[classes] = 1.0
        return q / q.sum()
    return fn


@scenario("cl-replay", ("variant", "step", "class", "accuracy"),
          "online class-incremental stream with and without a replay buffer")
def cl_replay(cfg, sink):
    s, b = cfg.stream, cfg.buffer
    stream = Stream(_stream_config(cfg))
    held = stream.held_out(s.held_out_per_class)
    spec = ModelSpec(cfg.model.arch, stream.config.dim, s.n_classes, cfg.model.hidden)
    p0 = init_params(spec, substream(cfg.seed, "cl-init"))
    variants = (
        ("replay", ReplayBuffer(b.capacity, stream.config.dim, s.n_classes, b.policy, b.tau), b.beta,
         None if b.beta_end == -1.0 else b.beta_end),
        ("no-replay", ReplayBuffer(0, stream.config.dim, s.n_classes, b.policy, b.tau), 1.0, None),
    )
    summary = {}
    for name, buf, beta, beta_end in variants:
        run = run_stream(spec, p0.copy(), stream, buf, beta, cfg.model.lr, b.replay_batch, cfg.seed,
                         s.checkpoint_every, beta_end)
        steps = [0] + [t + 1 for t in range(len(stream)) if (t + 1) % s.checkpoint_every == 0 or t == len(stream) - 1]
        m = eval_forgetting(spec, run.checkpoints, held)
        for i, step in enumerate(steps):
            for c in range(s.n_classes):
                yield _row(cfg, variant=name, step=step, **{"class": c}, accuracy=float(m.accuracy[i, c]))
        summary[name] = {k: v for k, v in m.to_dict().items() if k != "accuracy"}
        if len(buf):
            sink.put(f"buffer-{name}.json", buf.snapshot() + "\n")
    sink.put_json("summary.json", summary)


def _cl_clients(cfg, n_clients, capacities):
    s, b = cfg.stream, cfg.buffer
    clients = []
    for k in range(n_clients):
        sc = _stream_config(cfg, _restrict(_client_classes(k, cfg)))
        cap = capacities[k % len(capacities)] if capacities else b.capacity
        clients.append(ClientState(k, stream=Stream(sc, k), buffer=ReplayBuffer(cap, sc.dim, s.n_classes, b.policy, b.tau),
                                   seed=cfg.seed))
    return clients


@scenario("fcl", ("round", "mean_loss", "accuracy", "worst_class_accuracy"),
          "federated continual learning with per-client replay buffers")
def fcl(cfg, sink):
    s, b, f = cfg.stream, cfg.buffer, cfg.federation
    clients = _cl_clients(cfg, f.clients, None)
    global_stream = Stream(_stream_config(cfg), "global")
    held = global_stream.held_out(s.held_out_per_class)
    spec = ModelSpec(cfg.model.arch, clients[0].stream.config.dim, s.n_classes, cfg.model.hidden)
    params = init_params(spec, substream(cfg.seed, "fcl-init"))
    rounds = min(f.rounds, len(clients[0].stream))
    for t in range(rounds):
        rep = fcl_round(params, clients, spec, t, b.beta, cfg.model.lr, b.replay_batch, f.weighting)
        params = rep.params
        accs = [accuracy(spec, params, h) for h in held]
        yield _row(cfg, round=t, mean_loss=math.fsum(rep.client_losses) / len(rep.client_losses),
                   accuracy=math.fsum(accs) / len(accs), worst_class_accuracy=min(accs))


def build_topology(cfg) -> Topology:
    tp = cfg.topology
    n = cfg.federation.clients
    edges = {(e["u"], e["v"]): Link(float(e["cost"]), float(e.get("capacity", math.inf))) for e in tp.edges}
    return Topology(n, edges, n if tp.server else None)


@scenario("distributed-cl", ("policy", "step", "loss_sum", "comm_cost", "objective"),
          "replay-buffer placement policies on a client graph")
def distributed_cl(cfg, sink):
    s, b, f, tp = cfg.stream, cfg.buffer, cfg.federation, cfg.topology
    topo = build_topology(cfg)
    audit = {}
    for policy in tp.policies:
        clients = _cl_clients(cfg, f.clients, tp.capacities)
        spec = ModelSpec(cfg.model.arch, clients[0].stream.config.dim, s.n_classes, cfg.model.hidden)
        params = init_params(spec, substream(cfg.seed, "dcl-init"))
        steps = min(tp.steps, len(clients[0].stream))
        run = run_placement_policy(policy, clients, topo, spec, params, steps, tp.lam, b.beta, cfg.model.lr,
                                   b.replay_batch, b.server_capacity, f.weighting, seed=cfg.seed)
        for rep in run.reports:
            yield _row(cfg, policy=policy, step=rep.round, loss_sum=math.fsum(rep.client_losses),
                       comm_cost=rep.comm_cost, objective=rep.objective)
        recomputed = distributed_cl_objective(run.losses, run.decisions, topo, tp.lam)
        audit[policy] = {"objective": run.objective, "recomputed": recomputed, "total_cost": run.total_cost}
    sink.put_json("summary.json", audit)


def list_scenarios() -> list[str]:
    return sorted(REGISTRY)
