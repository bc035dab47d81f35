"""Tree ensembles assembled from client-trained trees.

Only trees travel between clients and the server; raw data never leaves a
client. Two schemes are provided: a federated random forest (union of
selected local trees) and federated gradient boosting (clients take turns
fitting the running ensemble's residuals on their own data).
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from edgelearn.models import LabeledDataset
from edgelearn.rng import substream
from edgelearn.tree import DecisionTree, StoppingCriteria, fit_tree

log = logging.getLogger(__name__)

Combiner = Literal["vote", "mean", "boost"]


@dataclass(frozen=True)
class Member:
    tree: DecisionTree
    client: int
    index: int  # tree index within its client (forest) or visit number (boosting)


@dataclass
class Ensemble:
    members: list[Member]
    combiner: Combiner
    base: float = 0.0
    lr: float = 1.0
    n_classes: int | None = None
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.combiner not in ("vote", "mean", "boost"):
            raise ValueError(f"unknown combiner {self.combiner!r}")
        if self.members:
            d = {m.tree.n_features for m in self.members}
            tasks = {m.tree.task for m in self.members}
            if len(d) != 1 or len(tasks) != 1:
                raise ValueError("ensemble members must share feature count and task")

    def __len__(self):
        return len(self.members)

    @property
    def trees(self) -> list[DecisionTree]:
        return [m.tree for m in self.members]

    def predict_batch(self, X) -> np.ndarray:
        if self.combiner == "boost":
            X = np.asarray(X, dtype=np.float64)
            total = np.zeros(X.shape[0])
            for m in self.members:
                total = total + m.tree.predict_batch(X)
            return self.base + self.lr * total
        if not self.members:
            raise ValueError("cannot predict with an empty ensemble")
        preds = np.stack([m.tree.predict_batch(X) for m in self.members])
        if self.combiner == "mean":
            return preds.mean(axis=0)
        n_classes = self.n_classes or int(preds.max()) + 1
        votes = np.zeros((preds.shape[1], n_classes), dtype=np.int64)
        for row in preds:
            votes[np.arange(row.size), row] += 1
        return np.argmax(votes, axis=1)

    def to_dict(self) -> dict:
        return {
            "combiner": self.combiner,
            "base": self.base,
            "lr": self.lr,
            "n_classes": self.n_classes,
            "members": [{"client": m.client, "index": m.index, "tree": m.tree.to_dict()} for m in self.members],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Ensemble":
        members = [Member(DecisionTree.from_dict(m["tree"]), int(m["client"]), int(m["index"])) for m in d["members"]]
        return cls(members, d["combiner"], float(d["base"]), float(d["lr"]), d.get("n_classes"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def predict_ensemble(ensemble: Ensemble, x):
    x = np.asarray(x, dtype=np.float64)
    if ensemble.combiner != "boost" and not ensemble.members:
        raise ValueError("cannot predict with an empty ensemble")
    out = ensemble.predict_batch(x[None, :])[0]
    return int(out) if ensemble.combiner == "vote" else float(out)


def tree_loss(tree: DecisionTree, data: LabeledDataset) -> float:
    """Misclassification rate (classification) or mean squared error (regression)."""
    pred = tree.predict_batch(data.features)
    if data.task == "classification":
        return float(np.mean(pred != data.labels))
    return float(np.mean((pred - data.labels) ** 2))


@dataclass(frozen=True)
class Selection:
    kind: Literal["random", "validation"]
    m: Sequence[int]
    # per-client held-out sets, or one set shared by every client
    validation: Sequence[LabeledDataset] | LabeledDataset | None = None


def select_trees(trees: Sequence[DecisionTree], m: int, kind: str, rng=None, validation=None) -> list[int]:
    """Indices (ascending) of the ``m`` trees a client contributes."""
    if not 0 <= m <= len(trees):
        raise ValueError(f"cannot select {m} of {len(trees)} trees")
    if kind == "random":
        return sorted(int(i) for i in rng.choice(len(trees), size=m, replace=False))
    if kind == "validation":
        if validation is None or len(validation) == 0:
            raise ValueError("validation-based selection needs a non-empty held-out set")
        losses = np.array([tree_loss(t, validation) for t in trees])
        return sorted(int(i) for i in np.argsort(losses, kind="stable")[:m])
    raise ValueError(f"unknown selection kind {kind!r}")


def federated_random_forest(
    client_data: Sequence[LabeledDataset],
    trees_per_client: Sequence[int],
    selection: Selection,
    stopping: StoppingCriteria = StoppingCriteria(),
    seed: int = 0,
    kind: str | None = None,
) -> Ensemble:
    """Each client grows bagged trees; the server unions the selected ones."""
    M = len(client_data)
    if len(trees_per_client) != M or len(selection.m) != M:
        raise ValueError("trees_per_client and selection.m need one entry per client")
    for T, m in zip(trees_per_client, selection.m):
        if not 0 <= m <= T:
            raise ValueError("need 0 <= m_k <= T_k for every client")
    if sum(selection.m) < 1:
        raise ValueError("at least one tree must be selected overall")

    members, warnings = [], []
    task = n_classes = None
    for k, data in enumerate(client_data):
        if len(data) == 0:
            warnings.append(f"client {k} has no data and contributes no trees")
            log.warning(warnings[-1])
            continue
        task = data.task
        n_classes = max(n_classes or 0, data.n_classes or 0) or None
        n_feat = max(1, math.ceil(math.sqrt(data.dim)))
        local = []
        for t in range(trees_per_client[k]):
            rng = substream(seed, "forest", k, t)
            boot = data.subset(rng.integers(0, len(data), size=len(data)))
            local.append(fit_tree(boot, stopping, kind, max_features=n_feat, rng=rng))
        val = selection.validation
        if val is not None and not isinstance(val, LabeledDataset):
            val = val[k]
        chosen = select_trees(local, selection.m[k], selection.kind, substream(seed, "forest-select", k), val)
        members.extend(Member(local[i], k, i) for i in chosen)
    if not members:
        raise ValueError("no client contributed any tree")
    combiner = "vote" if task == "classification" else "mean"
    return Ensemble(members, combiner, n_classes=n_classes, warnings=warnings)


def federated_gradient_boost(
    client_data: Sequence[LabeledDataset],
    rounds: int,
    lr: float,
    stopping: StoppingCriteria = StoppingCriteria(max_depth=3),
    order: Sequence[int] | None = None,
) -> Ensemble:
    """Round-robin residual fitting over clients.

    The initial value is the sample-weighted mean of the clients' reported
    label means. At every visit the client receives the current ensemble,
    fits one squared-error tree to its residuals, and the tree is appended
    (scaled by ``lr`` at prediction time).
    """
    if lr < 0:
        raise ValueError("lr must be >= 0")
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    order = list(range(len(client_data))) if order is None else list(order)
    warnings = []
    live = []
    for k in order:
        data = client_data[k]
        if data.task != "regression":
            raise ValueError("gradient boosting supports regression clients only")
        if len(data) == 0:
            warnings.append(f"client {k} has no data and is skipped")
            log.warning(warnings[-1])
        else:
            live.append(k)
    if not live:
        raise ValueError("no client holds any data")
    sizes = [len(client_data[k]) for k in live]
    means = [math.fsum(client_data[k].labels.tolist()) / n for k, n in zip(live, sizes)]
    base = math.fsum(n * mu for n, mu in zip(sizes, means)) / sum(sizes)

    ens = Ensemble([], "boost", base=base, lr=lr, warnings=warnings)
    visit = 0
    for _ in range(rounds):
        for k in live:
            data = client_data[k]
            resid = data.labels - ens.predict_batch(data.features)
            tree = fit_tree(LabeledDataset(data.features, resid, "regression"), stopping, "mse")
            ens.members.append(Member(tree, k, visit))
            visit += 1
    return ens
