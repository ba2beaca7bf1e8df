from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bitro.numerics import ContractError

DEFAULT_INPUT_WIDTH = 1024
DEFAULT_DIM = 128


@dataclass
class PcaModel:
    mean: np.ndarray  # (F,)
    components: np.ndarray  # (d, F), orthonormal rows
    explained_variance: np.ndarray  # (d,)
    total_variance: float = 0.0

    @property
    def dim(self) -> int:
        return self.components.shape[0]

    @property
    def explained_variance_ratio(self) -> np.ndarray:
        return self.explained_variance / self.total_variance if self.total_variance > 0 else \
            np.zeros_like(self.explained_variance)


def fit_pca(features, d: int = DEFAULT_DIM) -> PcaModel:
    x = np.asarray(features, dtype=np.float64)
    n, f = x.shape
    if d >= f or d >= n or d < 1:
        raise ContractError(f"PCA dimension must satisfy 1 <= d < min(N, F); got d={d}, N={n}, F={f}")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    var = s * s / (n - 1)
    comps = vt[:d].copy()
    # sign convention: largest-magnitude loading of each axis is positive
    flip = np.sign(comps[np.arange(d), np.argmax(np.abs(comps), axis=1)])
    comps *= flip[:, None]
    return PcaModel(mean, comps, var[:d], float(var.sum()))


def apply_pca(model: PcaModel, features) -> np.ndarray:
    return (np.asarray(features, dtype=np.float64) - model.mean) @ model.components.T


def reconstruct(model: PcaModel, projected) -> np.ndarray:
    return np.asarray(projected) @ model.components + model.mean
