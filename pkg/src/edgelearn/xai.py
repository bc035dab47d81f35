"""Black-box plus affine-surrogate co-training.

The black box ``f_theta`` is any :class:`~edgelearn.models.ModelSpec`; the
surrogate ``g_phi`` is always affine in ``x`` so that it stays readable. The
point-fidelity loss is the mean squared (Euclidean, for vector outputs)
distance between the two models' raw outputs.

Training the black box is a two-objective problem (predictive loss vs.
point fidelity under an exactly refit surrogate). Two drivers are offered:
min-norm gradient combination (:func:`bilevel_train`) and fixed-weight
scalarization (:func:`pareto_sweep`).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal, NamedTuple, Sequence

import numpy as np

from edgelearn.models import (
    LabeledDataset,
    LossKind,
    ModelSpec,
    backward_batch,
    forward_batch,
    gd_step,
    init_params,
    loss_pred,
)
from edgelearn.rng import substream

log = logging.getLogger(__name__)

STATIONARY_TOL = 1e-12


@dataclass(frozen=True)
class SurrogateSpec:
    input_dim: int
    output_dim: int = 1

    @classmethod
    def matching(cls, black_box: ModelSpec) -> "SurrogateSpec":
        return cls(black_box.input_dim, black_box.output_dim)

    @property
    def model(self) -> ModelSpec:
        return ModelSpec("linear", self.input_dim, self.output_dim)

    @property
    def n_params(self) -> int:
        return self.model.n_params


class PFEval(NamedTuple):
    loss: float
    grad_theta: np.ndarray | None
    grad_phi: np.ndarray | None


def point_fidelity(
    bb_spec: ModelSpec,
    theta: np.ndarray,
    sur_spec: SurrogateSpec,
    phi: np.ndarray,
    data: LabeledDataset,
    with_gradients: bool = True,
) -> PFEval:
    if bb_spec.input_dim != sur_spec.input_dim or bb_spec.output_dim != sur_spec.output_dim:
        raise ValueError("black box and surrogate must share input and output dimensions")
    if len(data) == 0:
        raise ValueError("point fidelity over an empty dataset is undefined")
    X = data.features
    diff = forward_batch(sur_spec.model, phi, X) - forward_batch(bb_spec, theta, X)
    n = X.shape[0]
    value = float(np.sum(diff * diff) / n)
    if not with_gradients:
        return PFEval(value, None, None)
    d_diff = (2.0 / n) * diff
    return PFEval(
        value,
        backward_batch(bb_spec, theta, X, -d_diff),
        backward_batch(sur_spec.model, phi, X, d_diff),
    )


def fit_surrogate(bb_spec: ModelSpec, theta: np.ndarray, data: LabeledDataset, ridge: float = 1e-8) -> np.ndarray:
    """Exact minimizer of ``PF(theta, phi) + ridge * ||phi||^2`` over affine ``phi``.

    Returned in the flat layout of ``SurrogateSpec.matching(bb_spec).model``.
    """
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    if len(data) == 0:
        raise ValueError("cannot fit a surrogate to an empty dataset")
    X = data.features
    n, d = X.shape
    A = np.hstack([X, np.ones((n, 1))])
    Y = forward_batch(bb_spec, theta, X)
    gram = A.T @ A / n + ridge * np.eye(d + 1)
    rhs = A.T @ Y / n
    if ridge == 0 and np.linalg.matrix_rank(A) < d + 1:
        raise np.linalg.LinAlgError(
            "design matrix is rank deficient; use ridge > 0 to regularize the surrogate fit"
        )
    coef = np.linalg.solve(gram, rhs)  # (d+1, out)
    return np.concatenate([coef[:d].T.ravel(), coef[d]])


class MgdaResult(NamedTuple):
    alpha: float
    direction: np.ndarray
    pareto_stationary: bool


def mgda_combine(g1: np.ndarray, g2: np.ndarray) -> MgdaResult:
    """Minimum-norm point of the segment between two gradients."""
    g1 = np.asarray(g1, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    if g1.shape != g2.shape:
        raise ValueError(f"gradient shapes differ: {g1.shape} vs {g2.shape}")
    delta = g1 - g2
    denom = float(delta @ delta)
    if denom == 0.0:
        alpha = 0.5
    else:
        alpha = float(np.clip(-(delta @ g2) / denom, 0.0, 1.0))
    direction = alpha * g1 + (1.0 - alpha) * g2
    return MgdaResult(alpha, direction, bool(np.linalg.norm(direction) < STATIONARY_TOL))


@dataclass(frozen=True)
class MooConfig:
    outer_iters: int = 300
    lr: float = 0.05
    ridge: float = 1e-8
    seed: int = 0
    loss: LossKind = "mse"
    # "sum" follows the unweighted per-client sums; "samples" weights by N_k / N.
    client_weighting: Literal["sum", "samples"] = "sum"
    # How gradients are rescaled before the min-norm weighting; see combine_objectives.
    normalization: Literal["none", "l2", "loss"] = "loss"

    def __post_init__(self):
        if self.outer_iters < 0:
            raise ValueError("outer_iters must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")
        if self.client_weighting not in ("sum", "samples"):
            raise ValueError(f"unknown client_weighting {self.client_weighting!r}")
        if self.normalization not in ("none", "l2", "loss"):
            raise ValueError(f"unknown normalization {self.normalization!r}")


@dataclass(frozen=True)
class MooRecord:
    iteration: int
    l_pred: float
    l_pf: float
    alpha: float
    grad_pred_norm: float
    grad_pf_norm: float
    direction_norm: float
    pareto_stationary: bool


@dataclass
class MooTrace:
    records: list[MooRecord] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def append(self, rec: MooRecord):
        self.records.append(rec)


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, detail: str):
        super().__init__(f"non-finite value at outer iteration {iteration}: {detail}")
        self.iteration = iteration


@dataclass(frozen=True)
class ParetoPoint:
    weight: float
    l_pred: float
    l_pf: float
    theta: np.ndarray = field(repr=False)
    phi: np.ndarray = field(repr=False)


def _objective_grads(spec: ModelSpec, theta, data, cfg: MooConfig):
    """Return (L_pred eval, PF eval, phi*) at ``theta`` with an exact inner refit."""
    sur = SurrogateSpec.matching(spec)
    phi = fit_surrogate(spec, theta, data, cfg.ridge)
    pred = loss_pred(spec, theta, data, cfg.loss)
    pf = point_fidelity(spec, theta, sur, phi, data)
    return pred, pf, phi


def combine_objectives(g_pred, g_pf, l_pred: float, l_pf: float, normalization: str = "loss") -> MgdaResult:
    """Pick the two-objective weight with :func:`mgda_combine` and build the step.

    With ``normalization="none"`` the step is the raw min-norm point. Otherwise
    the weight is computed on rescaled gradients (``g / ||g||`` for ``"l2"``,
    ``g / L`` for ``"loss"``) and applied to the raw gradients, so that an
    objective sitting near its own minimum does not throttle the other one.
    Positive rescaling leaves Pareto stationarity unchanged, so the flag is
    taken from the rescaled combination.
    """
    if normalization == "none":
        return mgda_combine(g_pred, g_pf)
    if normalization == "l2":
        s1, s2 = np.linalg.norm(g_pred), np.linalg.norm(g_pf)
    elif normalization == "loss":
        s1, s2 = l_pred, l_pf
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    # A zero scale means that objective is exactly minimal; leave it unscaled.
    s1 = s1 if s1 > 0 else 1.0
    s2 = s2 if s2 > 0 else 1.0
    res = mgda_combine(g_pred / s1, g_pf / s2)
    return MgdaResult(res.alpha, res.alpha * g_pred + (1.0 - res.alpha) * g_pf, res.pareto_stationary)


def _record(it, l_pred, l_pf, g_pred, g_pf, res: MgdaResult) -> MooRecord:
    rec = MooRecord(
        it, l_pred, l_pf, res.alpha,
        float(np.linalg.norm(g_pred)), float(np.linalg.norm(g_pf)),
        float(np.linalg.norm(res.direction)), res.pareto_stationary,
    )
    values = (rec.l_pred, rec.l_pf, rec.grad_pred_norm, rec.grad_pf_norm, rec.direction_norm)
    if not all(np.isfinite(v) for v in values):
        raise TrainingDiverged(it, repr(rec))
    return rec


def bilevel_step(spec: ModelSpec, theta: np.ndarray, data: LabeledDataset, cfg: MooConfig, iteration: int = 0):
    """One outer iteration: refit the surrogate, combine both gradients, step."""
    try:
        pred, pf, _ = _objective_grads(spec, theta, data, cfg)
    except FloatingPointError as exc:
        raise TrainingDiverged(iteration, str(exc)) from exc
    res = combine_objectives(pred.gradient, pf.grad_theta, pred.loss, pf.loss, cfg.normalization)
    rec = _record(iteration, pred.loss, pf.loss, pred.gradient, pf.grad_theta, res)
    if res.pareto_stationary:
        return theta, rec
    return gd_step(theta, res.direction, cfg.lr), rec


def bilevel_train(data: LabeledDataset, spec: ModelSpec, cfg: MooConfig, theta0: np.ndarray | None = None):
    """Min-norm co-training; returns ``(theta, phi, trace)``."""
    if len(data) == 0:
        raise ValueError("empty training set")
    theta = init_params(spec, substream(cfg.seed, "moo-init")) if theta0 is None else np.array(theta0, dtype=np.float64)
    trace = MooTrace()
    for it in range(cfg.outer_iters):
        theta, rec = bilevel_step(spec, theta, data, cfg, it)
        trace.append(rec)
    phi = fit_surrogate(spec, theta, data, cfg.ridge)
    return theta, phi, trace


def train_weighted(data: LabeledDataset, spec: ModelSpec, cfg: MooConfig, weight: float, theta0=None):
    """Gradient descent on ``weight * L_pred + (1 - weight) * PF(theta, phi*)``."""
    if not 0.0 <= weight <= 1.0:
        raise ValueError(f"scalarization weight must lie in [0, 1], got {weight}")
    theta = init_params(spec, substream(cfg.seed, "moo-init")) if theta0 is None else np.array(theta0, dtype=np.float64)
    for it in range(cfg.outer_iters):
        if weight == 1.0:
            # PF term has zero weight; skip the refit.
            g = loss_pred(spec, theta, data, cfg.loss).gradient
        else:
            pred, pf, _ = _objective_grads(spec, theta, data, cfg)
            g = weight * pred.gradient + (1.0 - weight) * pf.grad_theta
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(it, "gradient")
        theta = gd_step(theta, g, cfg.lr)
    phi = fit_surrogate(spec, theta, data, cfg.ridge)
    sur = SurrogateSpec.matching(spec)
    l_pred = loss_pred(spec, theta, data, cfg.loss, with_gradient=False).loss
    l_pf = point_fidelity(spec, theta, sur, phi, data, with_gradients=False).loss
    return ParetoPoint(float(weight), l_pred, l_pf, theta, phi)


def pareto_sweep(data: LabeledDataset, spec: ModelSpec, weights: Sequence[float], cfg: MooConfig) -> list[ParetoPoint]:
    for w in weights:
        if not 0.0 <= w <= 1.0:
            raise ValueError(f"scalarization weight must lie in [0, 1], got {w}")
    return [train_weighted(data, spec, cfg, w) for w in weights]


def dominates(a: tuple[float, float], b: tuple[float, float]) -> bool:
    return a[0] <= b[0] and a[1] <= b[1] and (a[0] < b[0] or a[1] < b[1])


def non_dominated(points: Sequence[ParetoPoint]) -> list[ParetoPoint]:
    pairs = [(p.l_pred, p.l_pf) for p in points]
    return [p for i, p in enumerate(points) if not any(dominates(q, pairs[i]) for j, q in enumerate(pairs) if j != i)]


@dataclass(frozen=True)
class FedMooRound:
    record: MooRecord
    included: tuple[int, ...]
    warnings: tuple[str, ...]


def federated_moo_round(
    theta: np.ndarray,
    client_data: Sequence[LabeledDataset],
    spec: ModelSpec,
    cfg: MooConfig,
    round_index: int = 0,
    executor=None,
):
    """One server round of the federated two-objective problem.

    Each client refits its own surrogate at the broadcast ``theta`` and
    reports both per-objective gradients; the server adds them up in client
    order, combines the two totals with :func:`mgda_combine`, and steps.
    Returns ``(new_theta, FedMooRound)``.
    """
    warnings = []
    included = []
    for k, d in enumerate(client_data):
        if len(d) == 0:
            warnings.append(f"client {k} has no data and was excluded")
            log.warning(warnings[-1])
        else:
            included.append(k)
    if not included:
        raise ValueError("no client holds any data")

    def work(k):
        return _objective_grads(spec, theta, client_data[k], cfg)

    results = list(executor.map(work, included)) if executor is not None else [work(k) for k in included]
    if cfg.client_weighting == "samples":
        total = sum(len(client_data[k]) for k in included)
        weights = [len(client_data[k]) / total for k in included]
    else:
        weights = [1.0] * len(included)

    g_pred = g_pf = None
    l_pred = l_pf = 0.0
    for w, (pred, pf, _) in zip(weights, results):
        gp = pred.gradient if w == 1.0 else w * pred.gradient
        gf = pf.grad_theta if w == 1.0 else w * pf.grad_theta
        g_pred = gp if g_pred is None else g_pred + gp
        g_pf = gf if g_pf is None else g_pf + gf
        l_pred += w * pred.loss
        l_pf += w * pf.loss
    res = combine_objectives(g_pred, g_pf, l_pred, l_pf, cfg.normalization)
    rec = _record(round_index, l_pred, l_pf, g_pred, g_pf, res)
    new_theta = theta if res.pareto_stationary else gd_step(theta, res.direction, cfg.lr)
    return new_theta, FedMooRound(rec, tuple(included), tuple(warnings))
