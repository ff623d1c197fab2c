import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forestiv.data import Dataset, split
from forestiv.forest import (
    ForestModel,
    ForestParams,
    TreeModel,
    fit_forest,
    grow_forest,
    predict_forest,
    predict_tree,
    tree_prediction_matrix,
)


def smooth_problem(n, seed, p=5):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-2, 2, (n, p))
    y = np.sin(X[:, 0]) + 0.5 * X[:, 1] ** 2 + 0.1 * rng.standard_normal(n)
    return X, y


def leaf_of(tree, row):
    node = 0
    while tree.feature[node] >= 0:
        node = tree.left[node] if row[tree.feature[node]] < tree.threshold[node] else tree.right[node]
    return node


class TestParams:
    @pytest.mark.parametrize("p, task, mtry, min_node", [
        (12, "regression", 4, 5),
        (2, "regression", 1, 5),
        (10, "classification", 3, 1),
        (1, "classification", 1, 1),
    ])
    def test_defaults(self, p, task, mtry, min_node):
        r = ForestParams(task=task).resolve(p)
        assert (r.mtry, r.min_node) == (mtry, min_node)

    @pytest.mark.parametrize("kwargs", [
        {"n_trees": 0}, {"mtry": 0}, {"min_node": 0}, {"task": "multiclass"},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            ForestParams(**kwargs)

    def test_mtry_above_p(self):
        with pytest.raises(ValueError, match="exceeds"):
            ForestParams(mtry=4).resolve(3)


class TestFit:
    def test_binary_feature_determines_truth(self):
        # exhaustive oracle: the single split at 0.5 separates the classes
        x = np.array([0, 1, 0, 1, 1, 0, 0, 1], dtype=float)
        f = grow_forest(x[:, None], x, ForestParams(1, task="classification", bootstrap=False))
        np.testing.assert_array_equal(predict_forest(f, x[:, None]), x)
        assert f.trees[0].threshold[0] == 0.5
        assert f.train_metric["accuracy"] == 1.0

    def test_constant_truth(self):
        X, _ = smooth_problem(40, 0)
        f = grow_forest(X, np.full(40, 2.25), ForestParams(10))
        for t in f.trees:
            np.testing.assert_array_equal(t.value[t.leaves()], 2.25)
        assert f.train_metric["rmse"] == 0.0

    @pytest.mark.parametrize("X, y, task, msg", [
        (np.empty((5, 0)), np.ones(5), "regression", "p=0"),
        (np.empty((0, 2)), np.empty(0), "regression", "empty"),
        (np.ones((4, 1)), np.ones(4), "classification", "single class"),
        (np.ones((4, 1)), np.array([0, 1, 2, 1.0]), "classification", r"\{0, 1\}"),
    ])
    def test_errors(self, X, y, task, msg):
        with pytest.raises(ValueError, match=msg):
            grow_forest(X, y, ForestParams(3, task=task))

    def test_fit_forest_uses_train_rows(self):
        X, y = smooth_problem(60, 1)
        d = split(Dataset(X, y), 30, 10, seed=0)
        rows = d.rows("train")
        a = fit_forest(d, ForestParams(5), seed=9)
        b = grow_forest(X[rows], y[rows], ForestParams(5), seed=9)
        assert a.to_json() == b.to_json()

    def test_empty_train_partition(self):
        d = split(Dataset(np.ones((5, 1)), np.ones(5)), 0, 2, seed=0)
        with pytest.raises(ValueError, match="empty training set"):
            fit_forest(d)

    def test_seed_reproducible_and_threads_invariant(self):
        X, y = smooth_problem(200, 2)
        a = grow_forest(X, y, ForestParams(8), seed=5)
        b = grow_forest(X, y, ForestParams(8), seed=5, threads=3)
        c = grow_forest(X, y, ForestParams(8), seed=6)
        assert a.to_json() == b.to_json()
        assert a.to_json() != c.to_json()
        assert len({t.to_dict().__repr__() for t in a.trees}) == 8

    def test_tree_structure_invariants(self):
        X, y = smooth_problem(300, 3)
        f = grow_forest(X, y, ForestParams(5, min_node=7))
        for t in f.trees:
            leaves = t.leaves()
            assert np.all(t.n_node[leaves] >= 7)
            internal = np.flatnonzero(t.feature >= 0)
            for arr in (t.left[internal], t.right[internal]):
                assert np.all((arr > 0) & (arr < t.n_nodes))
            # every node except the root has exactly one parent
            children = np.r_[t.left[internal], t.right[internal]]
            assert np.unique(children).size == children.size == t.n_nodes - 1

    def test_bootstrap_size_is_n(self):
        X, y = smooth_problem(150, 4)
        for t in grow_forest(X, y, ForestParams(4)).trees:
            assert t.n_node[0] == 150


class TestPredict:
    def test_stump(self):
        t = TreeModel(np.array([-1]), np.zeros(1), np.zeros(1, int), np.zeros(1, int),
                      np.array([3.5]), np.array([4]))
        np.testing.assert_array_equal(predict_tree(t, np.random.rand(6, 3)), 3.5)

    def test_leaf_tie_goes_to_class_zero(self):
        # a constant feature admits no split, so the root leaf holds counts (2, 2)
        X = np.ones((4, 1))
        f = grow_forest(X, np.array([0, 1, 0, 1.0]),
                        ForestParams(1, task="classification", bootstrap=False))
        t = f.trees[0]
        assert t.n_nodes == 1
        np.testing.assert_array_equal(t.counts[0], [2, 2])
        assert predict_tree(t, X)[0] == 0.0

    def test_memorization(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((50, 3))
        y = rng.standard_normal(50)
        f = grow_forest(X, y, ForestParams(1, min_node=1, bootstrap=False))
        np.testing.assert_array_equal(predict_tree(f.trees[0], X), y)

    def test_single_tree_forest(self):
        X, y = smooth_problem(100, 5)
        f = grow_forest(X, y, ForestParams(1))
        np.testing.assert_array_equal(predict_forest(f, X), predict_tree(f.trees[0], X))

    def test_mean_of_three_trees(self):
        stumps = tuple(
            TreeModel(np.array([-1]), np.zeros(1), np.zeros(1, int), np.zeros(1, int),
                      np.array([v]), np.array([1]))
            for v in (1.0, 2.0, 3.0))
        f = ForestModel(stumps, ForestParams(3), 2)
        np.testing.assert_array_equal(predict_forest(f, np.zeros((2, 2))), 2.0)

    @pytest.mark.parametrize("ones, expected", [(51, 1.0), (50, 0.0), (49, 0.0)])
    def test_majority_vote(self, ones, expected):
        def stump(v):
            return TreeModel(np.array([-1]), np.zeros(1), np.zeros(1, int), np.zeros(1, int),
                             np.array([v]), np.array([1]), np.array([[1 - v, v]], dtype=int))
        trees = tuple(stump(1.0) for _ in range(ones)) + tuple(stump(0.0) for _ in range(100 - ones))
        f = ForestModel(trees, ForestParams(100, task="classification"), 1)
        assert predict_forest(f, np.zeros((1, 1)))[0] == expected

    def test_matrix_columns_and_mean(self):
        X, y = smooth_problem(200, 6)
        f = grow_forest(X, y, ForestParams(7))
        P = tree_prediction_matrix(f, X[:40])
        assert P.shape == (40, 7)
        for i, t in enumerate(f.trees):
            np.testing.assert_array_equal(P[:, i], predict_tree(t, X[:40]))
        np.testing.assert_allclose(predict_forest(f, X[:40]), P.sum(axis=1) / 7, rtol=1e-12)

    def test_duplicate_trees_give_identical_columns(self):
        X, y = smooth_problem(80, 7)
        t = grow_forest(X, y, ForestParams(1)).trees[0]
        f = ForestModel((t, t), ForestParams(2), X.shape[1])
        P = tree_prediction_matrix(f, X)
        np.testing.assert_array_equal(P[:, 0], P[:, 1])

    def test_dimension_mismatch(self):
        X, y = smooth_problem(50, 8)
        f = grow_forest(X, y, ForestParams(2))
        with pytest.raises(ValueError, match="dimension mismatch"):
            tree_prediction_matrix(f, X[:, :3])
        with pytest.raises(ValueError, match="dimension mismatch"):
            predict_forest(f, np.ones((2, 6)))

    def test_threshold_routing(self):
        # rows equal to the threshold go right
        t = TreeModel(np.array([0, -1, -1]), np.array([1.0, 0, 0]), np.array([1, 0, 0]),
                      np.array([2, 0, 0]), np.array([0.0, -1.0, 1.0]), np.array([2, 1, 1]))
        np.testing.assert_array_equal(predict_tree(t, np.array([[0.5], [1.0], [2.0]])),
                                      [-1.0, 1.0, 1.0])

    def test_leaf_value_is_training_mean(self):
        X, y = smooth_problem(120, 9)
        f = grow_forest(X, y, ForestParams(1, bootstrap=False))
        t = f.trees[0]
        leaf = np.array([leaf_of(t, r) for r in X])
        for node in t.leaves():
            np.testing.assert_allclose(t.value[node], y[leaf == node].mean(), rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(5, 60))
def test_predictions_within_training_range(seed, n):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 3))
    y = rng.standard_normal(n) * 10
    f = grow_forest(X, y, ForestParams(4), seed=seed)
    P = tree_prediction_matrix(f, rng.standard_normal((30, 3)) * 5)
    assert P.min() >= y.min() and P.max() <= y.max()


def test_more_trees_do_not_hurt_on_average():
    gaps = []
    for seed in range(10):
        X, y = smooth_problem(400, seed)
        Xt, yt = smooth_problem(400, 1000 + seed)
        rmse = [np.sqrt(np.mean((predict_forest(grow_forest(X, y, ForestParams(m), seed=seed), Xt)
                                 - yt) ** 2)) for m in (1, 100)]
        gaps.append(rmse[0] - rmse[1])
    assert np.mean(gaps) > 0


def test_json_round_trip():
    X, y = smooth_problem(100, 10)
    for task, target in (("regression", y), ("classification", (y > y.mean()).astype(float))):
        f = grow_forest(X, target, ForestParams(6, task=task), seed=1)
        g = ForestModel.from_json(f.to_json())
        np.testing.assert_array_equal(tree_prediction_matrix(f, X), tree_prediction_matrix(g, X))
        assert g.params == f.params and g.train_metric == f.train_metric


def test_json_rejects_other_documents():
    with pytest.raises(ValueError, match="not a serialized forest"):
        ForestModel.from_json('{"format": "other"}')
    with pytest.raises(ValueError, match="unsupported"):
        ForestModel.from_json('{"format": "forestiv-forest", "version": 99}')
