"""PCA with retained-energy component selection."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensorio import load_tensors, save_tensors

# relative eigenvalue floors below which directions are treated as null;
# the Gram route divides by sqrt(lambda), so it needs the looser floor
_RANK_TOL = 1e-12
_GRAM_TOL = 1e-9


@dataclass(frozen=True)
class PCAModel:
    mean: np.ndarray                # (d,)
    components: np.ndarray          # (k, d), orthonormal rows
    explained_variance: np.ndarray  # (k,)
    total_variance: float
    energy_threshold: float

    @property
    def k(self) -> int:
        return self.components.shape[0]

    @property
    def explained_variance_ratio(self) -> np.ndarray:
        return self.explained_variance / self.total_variance


def _eigen_covariance(xc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cov = xc.T @ xc / (xc.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    return vals[::-1], vecs[:, ::-1].T


def _eigen_gram(xc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # d >> n: eigenvectors of X X^T map to principal axes via X^T u / sqrt(lambda)
    gram = xc @ xc.T
    vals, vecs = np.linalg.eigh(gram)
    vals, vecs = vals[::-1], vecs[:, ::-1]
    keep = vals > _GRAM_TOL * max(vals[0], 0.0)
    vals, vecs = vals[keep], vecs[:, keep]
    comps = (xc.T @ vecs) / np.sqrt(vals)
    return vals / (xc.shape[0] - 1), comps.T


def select_k(variances: np.ndarray, total: float, threshold: float) -> int:
    """Smallest k whose cumulative variance ratio reaches ``threshold``."""
    ratios = np.cumsum(variances) / total
    hits = np.nonzero(ratios >= threshold - 1e-12)[0]
    return int(hits[0]) + 1 if hits.size else len(variances)


def pca_fit(X: np.ndarray, energy_threshold: float = 0.99) -> PCAModel:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("pca_fit needs an (n, d) matrix with n >= 2")
    if not np.all(np.isfinite(X)):
        raise ValueError("pca_fit input contains non-finite values")
    if not 0 < energy_threshold <= 1:
        raise ValueError("energy_threshold must lie in (0, 1]")
    n, d = X.shape
    mean = X.mean(axis=0)
    xc = X - mean
    vals, comps = _eigen_gram(xc) if d > n else _eigen_covariance(xc)
    vals = np.clip(vals, 0.0, None)
    total = float(np.sum(xc * xc) / (n - 1))
    if total <= 0:
        raise ValueError("pca_fit input has zero variance")
    nonnull = vals > _RANK_TOL * vals[0]
    vals, comps = vals[nonnull], comps[nonnull]
    k = select_k(vals, total, energy_threshold)
    comps = comps[:k].copy()
    # sign convention: largest-magnitude entry of each axis is positive
    pivots = np.argmax(np.abs(comps), axis=1)
    comps *= np.sign(comps[np.arange(k), pivots])[:, None]
    return PCAModel(mean, comps, vals[:k].copy(), total, energy_threshold)


def pca_transform(model: PCAModel, x: np.ndarray) -> np.ndarray:
    """Project a d-vector or an (n, d) matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.mean.shape[0]:
        raise ValueError(f"expected dimension {model.mean.shape[0]}, got {x.shape[-1]}")
    return (x - model.mean) @ model.components.T


def pca_inverse(model: PCAModel, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != model.k:
        raise ValueError(f"expected dimension {model.k}, got {z.shape[-1]}")
    return model.mean + z @ model.components


def save_pca(model: PCAModel, path: str | Path) -> None:
    save_tensors(path, {
        "pca.mean": model.mean,
        "pca.components": model.components,
        "pca.explained_variance": model.explained_variance,
        "pca.total_variance": np.array([model.total_variance]),
        "pca.energy_threshold": np.array([model.energy_threshold]),
    }, dtype="float64")


def load_pca(path: str | Path) -> PCAModel:
    t = load_tensors(path)
    return PCAModel(t["pca.mean"], t["pca.components"], t["pca.explained_variance"],
                    float(t["pca.total_variance"][0]), float(t["pca.energy_threshold"][0]))
