import numpy as np
import pytest

from strokecomp.baselines import (BaselineConfig, RFConfig, SVMConfig, best_split, feature_matrix, fit_baseline,
                                  flatten, gini, knn_classify, knn_fit, load_baseline, rf_train, save_baseline,
                                  svm_train, tree_train, unflatten)
from strokecomp.skeleton import N_JOINTS

from conftest import make_seq


def _knn_reference(X, y, q, k):
    d = [(float(np.sum((x - q) ** 2)), i) for i, x in enumerate(X)]
    d.sort()  # distance, then training index
    votes = {}
    for _, i in d[:k]:
        votes[int(y[i])] = votes.get(int(y[i]), 0) + 1
    best = max(votes.values())
    return min(c for c, v in votes.items() if v == best)


def _blobs(rng, n, centers, sigma):
    X = np.concatenate([c + sigma * rng.normal(size=(n, len(c))) for c in centers])
    y = np.repeat(np.arange(len(centers)), n)
    return X, y


def _xor(rng, n):
    X, y = _blobs(rng, n, np.array([[1, 1], [-1, -1], [1, -1], [-1, 1]], float), 0.25)
    return X, (y >= 2).astype(np.int64)


def test_flatten_round_trip(rng):
    seq = make_seq(rng=rng, T=2)
    fv = flatten(seq)
    assert fv.values.shape == (120,) and fv.label == int(seq.label)
    assert np.array_equal(unflatten(fv.values), seq.coords)
    assert not flatten(make_seq(np.zeros((3, N_JOINTS, 3)))).values.any()
    X, y = feature_matrix([seq, seq])
    assert X.shape == (2, 120) and np.array_equal(X[0], fv.values)
    with pytest.raises(ValueError):
        feature_matrix([seq, make_seq(rng=rng, T=3)])


def test_knn_matches_exhaustive_sort(rng):
    X = rng.integers(-3, 4, size=(60, 4)).astype(float)  # integer grid makes distance ties common
    y = rng.integers(0, 4, size=60)
    Q = rng.integers(-3, 4, size=(200, 4)).astype(float)
    for k in (1, 3, 4, 5):
        pred = knn_fit(X, y, k).predict(Q)
        assert [int(p) for p in pred] == [_knn_reference(X, y, q, k) for q in Q]


def test_knn_examples(rng):
    X = rng.normal(size=(30, 5))
    y = rng.integers(0, 4, size=30)
    assert np.array_equal(knn_fit(X, y, 1).predict(X), y)
    X3 = np.array([[0.0], [0.1], [0.2], [5.0]])
    assert knn_classify(X3, np.array([2, 2, 1, 1]), np.array([0.05]), k=3) == 2
    assert knn_classify(X3[:2], np.array([3, 1]), np.array([0.05]), k=2) == 1  # vote tie -> lowest code
    with pytest.raises(ValueError):
        knn_fit(np.zeros((0, 2)), np.zeros(0, int), 1)
    with pytest.raises(ValueError):
        knn_fit(X, y, 31)


def test_svm_separable_blobs(rng):
    X, y = _blobs(rng, 50, np.array([[-4.0, 0.0], [4.0, 0.0]]), 0.5)
    m = svm_train(X, y, SVMConfig(seed=1))
    assert np.mean(m.predict(X) == y) == 1.0
    X4, y4 = _blobs(rng, 30, np.array([[6, 0], [-6, 0], [0, 6], [0, -6]], float), 0.5)
    assert np.mean(svm_train(X4, y4).predict(X4) == y4) == 1.0


def test_svm_label_flip_inverts(rng):
    X, y = _blobs(rng, 40, np.array([[-3.0, 1.0], [3.0, 1.0]]), 0.6)
    X = np.concatenate([X, X * [-1, 1]])  # mirror so the standardization is symmetric
    y = np.concatenate([y, 1 - y])
    a = svm_train(X, y, SVMConfig(seed=2))
    b = svm_train(X, 1 - y, SVMConfig(seed=2))
    grid = np.array([[x, 1.0] for x in np.linspace(-4, 4, 20) if abs(x) > 0.5])
    pa, pb = a.predict(grid), b.predict(grid)
    assert set(pa) == {0, 1} and np.array_equal(pa, 1 - pb)


def test_svm_determinism_and_errors(rng):
    X, y = _blobs(rng, 20, np.array([[0.0, 0.0], [2.0, 2.0], [0.0, 3.0]]), 1.0)
    assert np.array_equal(svm_train(X, y).W, svm_train(X, y).W)
    with pytest.raises(ValueError):
        svm_train(X, np.zeros(len(X), int))


def test_gini_values():
    assert gini([5, 0]) == 0.0 and gini([3, 3]) == 0.5 and abs(gini([1, 1, 1, 1]) - 0.75) < 1e-15


def _best_split_reference(X, y, n_classes, min_leaf):
    best = None
    for f in range(X.shape[1]):
        vals = np.unique(X[:, f])
        for lo, hi in zip(vals[:-1], vals[1:]):
            t = (lo + hi) / 2
            left, right = y[X[:, f] <= t], y[X[:, f] > t]
            if len(left) < min_leaf or len(right) < min_leaf:
                continue
            s = (len(left) * gini(np.bincount(left, minlength=n_classes)) +
                 len(right) * gini(np.bincount(right, minlength=n_classes))) / len(y)
            if best is None or s < best[2] - 1e-12:
                best = (f, t, s)
    return best


def test_best_split_matches_brute_force(rng):
    for _ in range(30):
        X = rng.integers(0, 6, size=(25, 3)).astype(float)
        y = rng.integers(0, 3, size=25)
        ref = _best_split_reference(X, y, 3, 2)
        got = best_split(X, y, np.arange(3), 3, 2)
        if ref is None:
            assert got is None
            continue
        assert abs(got[2] - ref[2]) < 1e-12
        assert (got[0], got[1]) == (ref[0], ref[1])


def test_depth_one_tree_recovers_threshold(rng):
    x = np.concatenate([rng.uniform(0, 1, 30), rng.uniform(2, 3, 30)])
    y = (x > 1.5).astype(np.int64)
    t = tree_train(x[:, None], y, max_depth=1, min_leaf=1, n_features=1, rng=rng, n_classes=2)
    assert t.depth == 1
    assert x[y == 0].max() < t.threshold[0] < x[y == 1].min()


def test_rf_pure_and_xor(rng):
    Xp = rng.normal(size=(20, 3))
    forest = rf_train(Xp, np.full(20, 2), RFConfig(n_trees=5))
    assert all(t.n_nodes == 1 for t in forest.trees)
    assert set(forest.predict(rng.normal(size=(10, 3)))) == {2}
    X, y = _xor(rng, 50)
    Xt, yt = _xor(rng, 50)
    assert np.mean(rf_train(X, y, RFConfig(seed=3)).predict(Xt) == yt) > 0.95


def test_rf_determinism(rng):
    X, y = _xor(rng, 20)
    a = rf_train(X, y, RFConfig(n_trees=7, seed=5)).to_dict()
    b = rf_train(X, y, RFConfig(n_trees=7, seed=5)).to_dict()
    assert a == b
    assert RFConfig().n_features(60) == 8 and RFConfig().n_features(7200) == 85


@pytest.mark.parametrize("name", ["knn", "svm", "rf"])
def test_json_round_trip(tmp_path, rng, name):
    X, y = _blobs(rng, 15, np.array([[0.0, 0.0], [3.0, 3.0], [0.0, 4.0]]), 0.7)
    cfg = BaselineConfig(knn_k=3, rf=RFConfig(n_trees=4))
    m = fit_baseline(name, X, y, cfg)
    m2 = load_baseline(save_baseline(m, tmp_path / f"{name}.json"))
    Q = rng.normal(scale=3, size=(40, 2))
    assert np.array_equal(m.predict(Q), m2.predict(Q))


def test_config_validation():
    with pytest.raises(ValueError):
        BaselineConfig(knn_k=0)
    with pytest.raises(ValueError):
        RFConfig(n_trees=0)
    with pytest.raises(ValueError):
        fit_baseline("lda", np.zeros((2, 1)), np.array([0, 1]))
