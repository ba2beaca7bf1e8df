"""K-means phenotype clustering and the cluster-consistency regularizer."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from bitro import numerics as nx

log = logging.getLogger(__name__)


def _sq_dist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - c[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def objective(x: np.ndarray, labels: np.ndarray, k: int) -> float:
    """J = sum_k mean_{i in S_k} ||x_i - mean(S_k)||^2 (empty clusters add 0)."""
    total = 0.0
    for j in range(k):
        members = x[labels == j]
        if len(members):
            dev = members - members.mean(axis=0)
            total += float(np.einsum("nd,nd->", dev, dev)) / len(members)
    return total


def wcss(x: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> float:
    dev = x - centroids[labels]
    return float(np.einsum("nd,nd->", dev, dev))


def assign(model: "PhenotypeModel | np.ndarray", h) -> np.ndarray:
    """Nearest centroid; argmin returns the lower index on ties."""
    centroids = model.centroids if isinstance(model, PhenotypeModel) else np.asarray(model)
    return np.argmin(_sq_dist(np.asarray(h, dtype=np.float64), centroids), axis=1)


@dataclass
class PhenotypeModel:
    k: int
    centroids: np.ndarray
    labels: np.ndarray
    history: list[float] = field(default_factory=list)  # J after each accepted step
    wcss_history: list[float] = field(default_factory=list)
    n_iter: int = 0
    stop_reason: str = ""

    @property
    def objective(self) -> float:
        return self.history[-1]


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    first = int(rng.integers(n))
    centers = [x[first]]
    d2 = _sq_dist(x, x[first:first + 1])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a center; take any unused one
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        d2 = np.minimum(d2, _sq_dist(x, x[idx:idx + 1])[:, 0])
    return np.array(centers)


def kmeans_fit(h, k: int = 8, seed: int = 0, max_iter: int = 100) -> PhenotypeModel:
    """k-means++ seeding followed by Lloyd iterations.

    The size-normalized objective J is not guaranteed to drop under a Lloyd
    step, so a step that would raise J is rejected and iteration stops.
    """
    x = np.asarray(h, dtype=np.float64)
    if x.ndim != 2:
        raise nx.ShapeError(f"expected N x D features, got {x.shape}")
    if len(x) < k:
        raise nx.ContractError(f"k-means needs N >= k, got N={len(x)}, k={k}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(x, k, rng)
    labels = assign(centroids, x)
    model = PhenotypeModel(k, centroids, labels)
    model.history.append(objective(x, labels, k))
    model.wcss_history.append(wcss(x, labels, centroids))
    model.stop_reason = "max_iter"
    for it in range(max_iter):
        new_c = centroids.copy()
        for j in range(k):
            members = x[labels == j]
            if len(members):
                new_c[j] = members.mean(axis=0)
        new_labels = assign(new_c, x)
        j_new = objective(x, new_labels, k)
        if j_new > model.history[-1]:
            model.stop_reason = "objective_guard"
            # keep the centroid update, which cannot change J for fixed labels
            centroids = new_c
            break
        centroids, changed = new_c, int(np.sum(new_labels != labels))
        labels = new_labels
        model.history.append(j_new)
        model.wcss_history.append(wcss(x, labels, centroids))
        model.n_iter = it + 1
        if changed == 0:
            model.stop_reason = "converged"
            break
    model.centroids, model.labels = centroids, labels
    log.debug("k-means stopped after %d iterations (%s), J=%.6g", model.n_iter,
              model.stop_reason, model.objective)
    return model


def cluster_loss(y_cell, labels) -> nx.Tensor:
    """sum_k (1/|S_k|) sum_{i in S_k} ||y_i - ybar_k||^2 over batch-local clusters.

    ybar_k is the mean of the rows passed in, so gradients flow through it.
    Clusters with fewer than two members contribute nothing.
    """
    y = nx.as_tensor(y_cell)
    labels = np.asarray(labels)
    uniq, inv, counts = np.unique(labels, return_inverse=True, return_counts=True)
    onehot = np.zeros((len(labels), len(uniq)))
    onehot[np.arange(len(labels)), inv] = 1.0
    means = nx.Tensor(onehot.T / counts[:, None]) @ y
    dev = y - nx.Tensor(onehot) @ means
    weight = np.where(counts >= 2, 1.0 / counts, 0.0)[inv]
    return (nx.square(dev) * weight[:, None]).sum()
