import logging

import numpy as np
import pytest

from edgelearn.ensemble import (
    Ensemble,
    Member,
    Selection,
    federated_gradient_boost,
    federated_random_forest,
    predict_ensemble,
    select_trees,
    tree_loss,
)
from edgelearn.models import LabeledDataset
from edgelearn.rng import substream
from edgelearn.synthetic import blobs, regression_data
from edgelearn.tree import DecisionTree, Leaf, StoppingCriteria, fit_tree, predict_tree

from oracles import reference_booster

STOP = StoppingCriteria(max_depth=3)


def _fit(X, r):
    return fit_tree(LabeledDataset(X, r, "regression"), STOP, "mse")


def _leaf_tree(value, task="classification"):
    return DecisionTree(Leaf(value, 1), 1, task, 3 if task == "classification" else None)


class TestBoosting:
    @pytest.mark.parametrize("seed", range(3))
    def test_single_client_matches_reference(self, seed):
        data = regression_data(120, seed=seed)
        X, y = data.features, data.labels
        ens = federated_gradient_boost([data], rounds=8, lr=0.3, stopping=STOP)
        base, trees = reference_booster(X, y, 8, 0.3, _fit)
        assert len(ens) == len(trees)
        assert abs(ens.base - base) <= 1e-12
        probe = substream(seed, "probe").uniform(-2, 2, size=(200, 2))
        for k in range(len(trees)):
            np.testing.assert_allclose(ens.members[k].tree.predict_batch(probe), trees[k].predict_batch(probe), rtol=0, atol=1e-12)
            prefix = Ensemble(ens.members[: k + 1], "boost", base=ens.base, lr=0.3)
            ref = base + sum(0.3 * t.predict_batch(probe) for t in trees[: k + 1])
            np.testing.assert_allclose(prefix.predict_batch(probe), ref, rtol=0, atol=1e-12)

    def test_zero_lr_predicts_base(self):
        data = regression_data(50, seed=1)
        ens = federated_gradient_boost([data], rounds=3, lr=0.0)
        np.testing.assert_array_equal(ens.predict_batch(data.features), np.full(50, ens.base))

    def test_base_is_pooled_mean(self):
        a = LabeledDataset(np.zeros((2, 1)), np.array([1.0, 3.0]), "regression")
        b = LabeledDataset(np.zeros((3, 1)), np.array([6.0, 6.0, 6.0]), "regression")
        assert federated_gradient_boost([a, b], 0, 0.1).base == pytest.approx(4.4)

    @pytest.mark.parametrize("lr", [0.05, 0.1, 0.3])
    def test_training_error_non_increasing_on_smooth_target(self, lr):
        x = np.sort(substream(2, "smooth").uniform(-3, 3, size=150))
        data = LabeledDataset(x[:, None], np.sin(x) + 0.1 * x * x, "regression")
        ens = federated_gradient_boost([data], rounds=20, lr=lr, stopping=STOP)
        mse = []
        for v in range(len(ens) + 1):
            pre = Ensemble(ens.members[:v], "boost", base=ens.base, lr=lr)
            mse.append(float(np.mean((pre.predict_batch(data.features) - data.labels) ** 2)))
        assert all(b <= a + 1e-12 for a, b in zip(mse, mse[1:]))
        assert mse[-1] < 0.5 * mse[0]

    def test_each_visit_lowers_the_visited_clients_error(self):
        data = regression_data(150, seed=2)
        clients = [data.subset(np.arange(k, 150, 3)) for k in range(3)]
        ens = federated_gradient_boost(clients, rounds=4, lr=0.3, stopping=STOP)
        for v, mem in enumerate(ens.members):
            c = clients[mem.client]
            before = Ensemble(ens.members[:v], "boost", base=ens.base, lr=0.3).predict_batch(c.features)
            after = Ensemble(ens.members[: v + 1], "boost", base=ens.base, lr=0.3).predict_batch(c.features)
            assert np.mean((after - c.labels) ** 2) <= np.mean((before - c.labels) ** 2) + 1e-12

    def test_visit_order_round_robin(self):
        data = regression_data(90, seed=3)
        clients = [data.subset(np.arange(k, 90, 3)) for k in range(3)]
        ens = federated_gradient_boost(clients, rounds=2, lr=0.1, order=[2, 0, 1])
        assert [m.client for m in ens.members] == [2, 0, 1, 2, 0, 1]
        assert [m.index for m in ens.members] == list(range(6))

    def test_empty_client_skipped_with_warning(self, caplog):
        data = regression_data(40, seed=4)
        empty = data.subset([])
        with caplog.at_level(logging.WARNING):
            ens = federated_gradient_boost([data, empty], rounds=2, lr=0.1)
        assert len(ens) == 2 and ens.warnings
        assert "client 1" in caplog.text

    def test_rejects_classification_and_bad_args(self):
        cls = blobs(20, 2, 2, seed=0)
        with pytest.raises(ValueError):
            federated_gradient_boost([cls], 1, 0.1)
        data = regression_data(10, seed=0)
        with pytest.raises(ValueError):
            federated_gradient_boost([data], 1, -0.1)


class TestForest:
    def _clients(self, seed=0, M=3):
        data = blobs(240, 4, 3, seed=seed)
        return [data.subset(np.arange(k, 240, M)) for k in range(M)]

    def test_size_law(self):
        clients = self._clients()
        ens = federated_random_forest(clients, [5, 4, 6], Selection("random", [2, 4, 3]), STOP, seed=1)
        assert len(ens) == 9
        assert [sum(m.client == k for m in ens.members) for k in range(3)] == [2, 4, 3]

    def test_validation_selection_matches_sort_oracle(self):
        clients = self._clients(1)
        val = blobs(90, 4, 3, seed=9)
        T, m = 7, 3
        ens = federated_random_forest(clients, [T] * 3, Selection("validation", [m] * 3, val), STOP, seed=2)
        full = federated_random_forest(clients, [T] * 3, Selection("random", [T] * 3), STOP, seed=2)
        for k in range(3):
            local = [mem.tree for mem in full.members if mem.client == k]
            losses = [tree_loss(t, val) for t in local]
            expected = sorted(sorted(range(T), key=lambda i: (losses[i], i))[:m])
            assert [mem.index for mem in ens.members if mem.client == k] == expected

    def test_single_client_keeping_all_is_the_local_forest(self):
        data = self._clients()[0]
        ens = federated_random_forest([data], [4], Selection("random", [4]), STOP, seed=5)
        assert [m.index for m in ens.members] == [0, 1, 2, 3]
        again = federated_random_forest([data], [4], Selection("random", [4]), STOP, seed=5)
        assert ens.to_json() == again.to_json()

    def test_selection_bounds(self):
        clients = self._clients()
        with pytest.raises(ValueError):
            federated_random_forest(clients, [2, 2, 2], Selection("random", [3, 1, 1]), STOP)
        with pytest.raises(ValueError):
            federated_random_forest(clients, [2, 2, 2], Selection("random", [0, 0, 0]), STOP)
        with pytest.raises(ValueError):
            select_trees([_leaf_tree(0)], 1, "validation")

    def test_empty_client_warns(self, caplog):
        clients = self._clients()
        clients[1] = clients[1].subset([])
        with caplog.at_level(logging.WARNING):
            ens = federated_random_forest(clients, [3, 3, 3], Selection("random", [2, 2, 2]), STOP)
        assert len(ens) == 4 and "client 1" in caplog.text

    def test_regression_forest_averages(self):
        data = regression_data(90, seed=6)
        ens = federated_random_forest([data], [3], Selection("random", [3]), STOP, seed=0)
        assert ens.combiner == "mean"
        X = data.features[:5]
        expected = np.mean([t.predict_batch(X) for t in ens.trees], axis=0)
        np.testing.assert_allclose(ens.predict_batch(X), expected, rtol=0, atol=1e-15)


class TestCombiners:
    def test_majority_vote(self):
        ens = Ensemble([Member(_leaf_tree(v), 0, i) for i, v in enumerate([0, 0, 1])], "vote", n_classes=3)
        assert predict_ensemble(ens, [0.0]) == 0

    def test_vote_tie_goes_to_lowest_class(self):
        ens = Ensemble([Member(_leaf_tree(v), 0, i) for i, v in enumerate([2, 1])], "vote", n_classes=3)
        assert predict_ensemble(ens, [0.0]) == 1

    def test_one_member_equals_tree(self):
        data = blobs(60, 2, 3, seed=0)
        tree = fit_tree(data, STOP)
        ens = Ensemble([Member(tree, 0, 0)], "vote", n_classes=3)
        for x in data.features[:20]:
            assert predict_ensemble(ens, x) == predict_tree(tree, x)

    def test_empty_ensemble_rejected(self):
        with pytest.raises(ValueError):
            predict_ensemble(Ensemble([], "vote"), [0.0])

    def test_serialization_round_trip(self):
        data = regression_data(60, seed=7)
        ens = federated_gradient_boost([data], 3, 0.2)
        back = Ensemble.from_dict(ens.to_dict())
        assert back.to_json() == ens.to_json()
        np.testing.assert_array_equal(back.predict_batch(data.features), ens.predict_batch(data.features))
