"""One-vs-rest L1-regularised logistic regression for ranked identity prediction.

Each class c solves

    min_{w, b}  sum_i log(1 + exp(-t_i (w . x_i + b))) + ||w||_1 / C

with ``t_i = +1`` for members of c and ``-1`` otherwise, the bias left
unpenalised. The K binary problems are independent; they are stepped
together as matrix operations, yet every class keeps its own step size
and stopping point.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensorio import load_tensors, save_tensors

log = logging.getLogger(__name__)

MAX_ITER = 10_000
REL_TOL = 1e-8
DEFAULT_C_GRID = (1e-2, 1e0, 1e2, 1e4, 1e5, 1e6)


@dataclass(frozen=True)
class IdentModel:
    classes: tuple[str, ...]
    weights: np.ndarray        # (K, k)
    biases: np.ndarray         # (K,)
    C: float
    feature_mean: np.ndarray   # (k,) standardisation fitted on training data
    feature_scale: np.ndarray  # (k,)
    scheme: str = "one-vs-rest"

    def standardize(self, X: np.ndarray) -> np.ndarray:
        return (X - self.feature_mean) / self.feature_scale

    def margins(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.weights.shape[1]:
            raise ValueError(f"expected feature dimension {self.weights.shape[1]}, got {X.shape[-1]}")
        return self.standardize(X) @ self.weights.T + self.biases


@dataclass(frozen=True)
class RankedPrediction:
    ranking: tuple[tuple[str, float], ...]

    @property
    def labels(self) -> list[str]:
        return [c for c, _ in self.ranking]

    def rank_of(self, label: str) -> int:
        """1-based rank of ``label``."""
        return self.labels.index(label) + 1


@dataclass
class FitLog:
    """Per-class regularised objective after every accepted step."""
    objectives: list[list[float]] = field(default_factory=list)
    iterations: list[int] = field(default_factory=list)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def soft_threshold(x: np.ndarray, t) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def objective_and_gradient(w: np.ndarray, b: float, X: np.ndarray, t: np.ndarray, C: float | None = None
                           ) -> tuple[float, np.ndarray, float]:
    """Smooth logistic loss and its gradient ``(value, grad_w, grad_b)``.

    The L1 term is left to the proximal step, so ``C`` only validates
    the call signature and does not enter the value.
    """
    X = np.asarray(X, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if X.ndim != 2 or w.shape != (X.shape[1],) or np.shape(t) != (X.shape[0],):
        raise ValueError(f"shape mismatch: X {X.shape}, w {w.shape}, t {np.shape(t)}")
    if C is not None and C <= 0:
        raise ValueError("C must be positive")
    z = -t * (X @ w + b)
    value = float(np.logaddexp(0.0, z).sum())
    coef = -t * sigmoid(z)
    return value, X.T @ coef, float(coef.sum())


def _smooth_batch(W, b, X, T):
    Z = -T * (X @ W.T + b)
    f = np.logaddexp(0.0, Z).sum(axis=0)
    G = -T * sigmoid(Z)
    return f, G.T @ X, G.sum(axis=0)


def fit_one_vs_rest(X: np.ndarray, T: np.ndarray, C: float, max_iter: int = MAX_ITER,
                    tol: float = REL_TOL, fit_log: FitLog | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Proximal gradient with backtracking for ``K`` independent binary problems.

    ``T`` is ``(n, K)`` with entries ±1. A class stops once its relative
    objective decrease drops below ``tol``; everything stops at ``max_iter``.
    """
    n, d = X.shape
    K = T.shape[1]
    W = np.zeros((K, d))
    b = np.zeros(K)
    lam = 1.0 / C
    L = np.full(K, 0.25 * (np.sum(X * X) + n) / max(n, 1))  # mean-curvature guess; backtracking fixes it
    f, gW, gb = _smooth_batch(W, b, X, T)
    F = f + lam * np.abs(W).sum(axis=1)
    active = np.ones(K, dtype=bool)
    history = [[float(v)] for v in F]
    iters = np.zeros(K, dtype=int)

    for _ in range(max_iter):
        if not active.any():
            break
        L = np.where(active, L * 0.5, L)
        pending = active.copy()
        Wn, bn, fn = W.copy(), b.copy(), f.copy()
        for _ in range(60):
            step = 1.0 / L
            Wc = soft_threshold(W - step[:, None] * gW, (lam * step)[:, None])
            bc = b - step * gb
            fc, _, _ = _smooth_batch(Wc, bc, X, T)
            D, db = Wc - W, bc - b
            bound = f + np.sum(gW * D, axis=1) + gb * db + 0.5 * L * (np.sum(D * D, axis=1) + db * db)
            ok = pending & (fc <= bound + 1e-12 * np.abs(f))
            Wn[ok], bn[ok], fn[ok] = Wc[ok], bc[ok], fc[ok]
            pending &= ~ok
            if not pending.any():
                break
            L = np.where(pending, L * 2.0, L)
        else:
            log.warning("line search did not converge for %d classes", int(pending.sum()))
            active &= ~pending
        Fn = fn + lam * np.abs(Wn).sum(axis=1)
        upd = active
        W[upd], b[upd], f[upd] = Wn[upd], bn[upd], fn[upd]
        decrease = (F - Fn) / np.maximum(np.abs(F), 1e-300)
        for c in np.nonzero(upd)[0]:
            history[c].append(float(Fn[c]))
        iters[upd] += 1
        F = np.where(upd, Fn, F)
        active = active & (decrease >= tol)
        _, gW, gb = _smooth_batch(W, b, X, T)

    if fit_log is not None:
        fit_log.objectives = history
        fit_log.iterations = iters.tolist()
    return W, b


def train(X: np.ndarray, y, C: float, classes=None, max_iter: int = MAX_ITER,
          fit_log: FitLog | None = None) -> IdentModel:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(str)
    if C <= 0:
        raise ValueError("C must be positive")
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be (n, k) with one label per row")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain non-finite values")
    present = sorted(set(y.tolist()))
    classes = tuple(present if classes is None else (str(c) for c in classes))
    missing = set(classes) - set(present)
    if missing:
        raise ValueError(f"classes without training samples: {sorted(missing)}")
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    if set(present) - set(classes):
        raise ValueError("labels outside the declared class list")
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale <= 1e-12] = 1.0
    Xs = (X - mean) / scale
    T = np.where(y[:, None] == np.array(classes)[None, :], 1.0, -1.0)
    W, b = fit_one_vs_rest(Xs, T, C, max_iter=max_iter, fit_log=fit_log)
    return IdentModel(classes, W, b, float(C), mean, scale)


def _rank(model: IdentModel, margins: np.ndarray) -> RankedPrediction:
    # sort on margins, not sigmoid scores: the sigmoid saturates to 1.0 for
    # large margins and would turn distinct margins into ties
    order = np.lexsort((np.arange(len(model.classes)), -margins))
    scores = sigmoid(margins)
    return RankedPrediction(tuple((model.classes[i], float(scores[i])) for i in order))


def predict_ranked(model: IdentModel, x: np.ndarray) -> RankedPrediction:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("predict_ranked takes a single feature vector")
    return _rank(model, model.margins(x))


def predict_ranked_batch(model: IdentModel, X: np.ndarray) -> list[RankedPrediction]:
    return [_rank(model, m) for m in model.margins(np.atleast_2d(X))]


def stratified_folds(y, n_folds: int, seed: int, groups=None) -> np.ndarray:
    """Fold index per sample; each class is shuffled and dealt round-robin.

    With ``groups``, whole groups (e.g. an image and its augmented copies)
    are dealt instead of samples, so a group never straddles folds.
    """
    y = np.asarray(y).astype(str)
    if groups is None:
        groups = np.arange(len(y)).astype(str)
    groups = np.asarray(groups).astype(str)
    group_ids, first, inverse = np.unique(groups, return_index=True, return_inverse=True)
    group_label = y[first]
    rng = np.random.default_rng(seed)
    group_fold = np.empty(len(group_ids), dtype=int)
    for c in sorted(set(group_label.tolist())):
        idx = np.nonzero(group_label == c)[0]
        if len(idx) < n_folds:
            raise ValueError(f"class {c!r} has {len(idx)} samples, fewer than {n_folds} folds")
        idx = idx[rng.permutation(len(idx))]
        offset = int(rng.integers(n_folds))
        group_fold[idx] = (np.arange(len(idx)) + offset) % n_folds
    return group_fold[inverse.reshape(-1)]


def grid_search(X: np.ndarray, y, C_grid=DEFAULT_C_GRID, n_folds: int = 3, seed: int = 0,
                max_iter: int = MAX_ITER, groups=None) -> tuple[float, dict[float, float]]:
    """Stratified k-fold rank-1 accuracy per C; ties go to the larger C."""
    if n_folds < 2:
        raise ValueError("n_folds must be >= 2")
    grid = [float(c) for c in C_grid]
    if not grid:
        raise ValueError("empty C grid")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(str)
    folds = stratified_folds(y, n_folds, seed, groups)
    classes = sorted(set(y.tolist()))
    scores = {}
    for C in grid:
        acc = []
        for k in range(n_folds):
            tr, te = folds != k, folds == k
            model = train(X[tr], y[tr], C, classes=classes, max_iter=max_iter)
            pred = model.margins(X[te])
            top = np.array(model.classes)[np.argmax(pred, axis=1)]
            acc.append(float(np.mean(top == y[te])))
        scores[C] = float(np.mean(acc))
    best = max(grid, key=lambda c: (scores[c], c))
    return best, scores


def save_ident_model(model: IdentModel, tensor_path: str | Path, classes_path: str | Path) -> None:
    save_tensors(tensor_path, {
        "ident.weights": model.weights,
        "ident.biases": model.biases,
        "ident.C": np.array([model.C]),
        "ident.feature_mean": model.feature_mean,
        "ident.feature_scale": model.feature_scale,
    }, dtype="float64")
    Path(classes_path).write_text("".join(f"{c}\n" for c in model.classes), encoding="utf-8")


def load_ident_model(tensor_path: str | Path, classes_path: str | Path) -> IdentModel:
    t = load_tensors(tensor_path)
    classes = tuple(line for line in Path(classes_path).read_text(encoding="utf-8").splitlines() if line)
    if len(classes) != t["ident.weights"].shape[0]:
        raise ValueError("class list length does not match the weight matrix")
    return IdentModel(classes, t["ident.weights"], t["ident.biases"], float(t["ident.C"][0]),
                      t["ident.feature_mean"], t["ident.feature_scale"])
