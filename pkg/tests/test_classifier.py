import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flankid.classifier import (FitLog, RankedPrediction, fit_one_vs_rest, grid_search, load_ident_model,
                                objective_and_gradient, predict_ranked, predict_ranked_batch, save_ident_model,
                                sigmoid, soft_threshold, stratified_folds, train)


def blobs(seed, n_per=15, k=4, d=6, spread=0.6):
    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((k, d)) * 3
    X = np.vstack([c + spread * rng.standard_normal((n_per, d)) for c in centres])
    y = np.repeat([f"id{i}" for i in range(k)], n_per)
    return X, y


def central_difference(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n, d = int(rng.integers(5, 30)), int(rng.integers(1, 8))
        X = rng.standard_normal((n, d))
        t = rng.choice([-1.0, 1.0], n)
        w, b = rng.standard_normal(d), float(rng.standard_normal())
        _, gw, gb = objective_and_gradient(w, b, X, t)
        theta = np.append(w, b)
        f = lambda th: objective_and_gradient(th[:-1], th[-1], X, t)[0]
        num = central_difference(f, theta)
        ana = np.append(gw, gb)
        assert np.linalg.norm(ana - num) / max(np.linalg.norm(num), 1e-12) <= 1e-4


def test_objective_value_is_logistic_loss():
    X = np.array([[1.0, 0.0], [0.0, 2.0]])
    t = np.array([1.0, -1.0])
    value, _, _ = objective_and_gradient(np.array([0.5, 0.25]), 0.1, X, t)
    ref = np.log1p(np.exp(-(0.5 + 0.1))) + np.log1p(np.exp(0.5 + 0.1))
    assert value == pytest.approx(ref, rel=1e-14)


def test_helpers():
    assert sigmoid(0.0) == 0.5 and sigmoid(800.0) == 1.0 and sigmoid(-800.0) == 0.0
    np.testing.assert_array_equal(soft_threshold(np.array([-3.0, -0.5, 0.5, 2.0]), 1.0), [-2.0, 0.0, 0.0, 1.0])


def test_logged_objective_never_increases():
    for seed in range(3):
        X, y = blobs(seed, spread=2.0)
        log = FitLog()
        train(X, y, 10.0, fit_log=log)
        for hist in log.objectives:
            assert len(hist) > 1
            assert all(b <= a * (1 + 1e-12) for a, b in zip(hist, hist[1:]))


def test_separable_toy_is_fit_exactly():
    X, y = blobs(1, spread=0.3)
    model = train(X, y, 1e6)
    top = [p.labels[0] for p in predict_ranked_batch(model, X)]
    assert np.mean(np.array(top) == y) == 1.0


def test_strong_penalty_is_sparser():
    rng = np.random.default_rng(7)
    X = rng.standard_normal((80, 12))
    y = np.where(X[:, 0] + 0.8 * rng.standard_normal(80) > 0, "a", "b")
    y = np.where(X[:, 1] > 1.0, "c", y)
    strong = train(X, y, 1e-3)
    weak = train(X, y, 1e6)
    assert np.count_nonzero(strong.weights) < np.count_nonzero(weak.weights)


def test_solution_satisfies_l1_optimality():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((60, 5))
    t = np.where(X @ np.array([2.0, -1.0, 0.0, 0.0, 0.5]) + 0.5 * rng.standard_normal(60) > 0, 1.0, -1.0)
    C = 0.5
    W, b = fit_one_vs_rest(X, t[:, None], C)
    _, gw, gb = objective_and_gradient(W[0], b[0], X, t)
    lam = 1 / C
    assert abs(gb) < 1e-3
    for wj, gj in zip(W[0], gw):
        if wj != 0:
            assert abs(gj + lam * np.sign(wj)) < 1e-3
        else:
            assert abs(gj) <= lam + 1e-6


def test_classes_are_independent_problems():
    X, y = blobs(4)
    model = train(X, y, 100.0)
    T = np.where(y == "id2", 1.0, -1.0)[:, None]
    Xs = model.standardize(X)
    W, b = fit_one_vs_rest(Xs, T, 100.0)
    np.testing.assert_allclose(model.weights[2], W[0], atol=1e-8)


def test_ranking_covers_all_classes_sorted():
    X, y = blobs(5)
    model = train(X, y, 1e3)
    pred = predict_ranked(model, X[0])
    assert sorted(pred.labels) == sorted(set(y))
    scores = [s for _, s in pred.ranking]
    assert scores == sorted(scores, reverse=True)
    assert pred.rank_of(y[0]) == 1


def test_ranking_uses_margins_when_sigmoid_saturates():
    X, y = blobs(6, spread=0.1)
    model = train(X, y, 1e6)
    margins = model.margins(X[:1])[0]
    pred = predict_ranked(model, X[0])
    assert pred.labels == [model.classes[i] for i in np.argsort(-margins, kind="stable")]


def test_train_validation():
    X, y = blobs(0)
    with pytest.raises(ValueError):
        train(X, y, 0.0)
    with pytest.raises(ValueError):
        train(X, np.full(len(y), "one"), 1.0)
    with pytest.raises(ValueError):
        train(X, y, 1.0, classes=["id0", "id1", "id2", "id3", "ghost"])
    with pytest.raises(ValueError):
        predict_ranked(train(X, y, 1.0), np.zeros(3))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(3, 9), min_size=2, max_size=5), st.integers(0, 1000))
def test_folds_are_stratified(sizes, seed):
    y = np.repeat([f"c{i}" for i in range(len(sizes))], sizes)
    folds = stratified_folds(y, 3, seed)
    for c in set(y):
        counts = np.bincount(folds[y == c], minlength=3)
        assert counts.max() - counts.min() <= 1
    np.testing.assert_array_equal(folds, stratified_folds(y, 3, seed))


def test_grouped_folds_keep_copies_together():
    y = np.repeat(["a", "b"], 12)
    groups = np.repeat(np.arange(8), 3)
    folds = stratified_folds(y, 2, 0, groups)
    for g in range(8):
        assert len(set(folds[groups == g])) == 1


def test_grid_search_prefers_working_C():
    X, y = blobs(8, n_per=9)
    best, scores = grid_search(X, y, [1e-3, 1e2], n_folds=3, seed=0)
    assert set(scores) == {1e-3, 1e2}
    assert best == 1e2 and scores[1e2] > scores[1e-3]
    # exact ties go to the larger value
    best_tie, _ = grid_search(X, y, [1e4, 1e5], n_folds=3, seed=0)
    assert best_tie == 1e5


def test_model_persistence(tmp_path):
    X, y = blobs(9)
    model = train(X, y, 1e2)
    save_ident_model(model, tmp_path / "c.ntc", tmp_path / "classes.txt")
    back = load_ident_model(tmp_path / "c.ntc", tmp_path / "classes.txt")
    assert back.classes == model.classes and back.C == model.C
    assert predict_ranked(back, X[3]) == predict_ranked(model, X[3])
    assert isinstance(predict_ranked(back, X[3]), RankedPrediction)
