"""Gene-query attention pooling, the shared readout head and deconvolution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bitro import numerics as nx


class BagError(ValueError):
    pass


@dataclass
class ReadoutParams:
    w1: object  # D x D_h
    w2: object  # D_h x 1
    use_softplus: bool = True


def pool(h_cell, q, mask: np.ndarray | None = None):
    """Returns (A, Z) with A = softmax_rows(Q H^T / sqrt(D)) and Z = A H.

    Works on one bag (H: N x D) or a padded batch (H: B x N x D, mask B x N).
    """
    h = nx.as_tensor(h_cell)
    q = nx.as_tensor(q)
    if h.shape[-2] == 0:
        raise BagError("cannot pool an empty bag")
    if h.shape[-1] != q.shape[-1]:
        raise nx.ShapeError(f"queries have width {q.shape[-1]}, cells {h.shape[-1]}")
    dim = h.shape[-1]
    ht = nx.transpose(h, (1, 0) if h.ndim == 2 else (0, 2, 1))
    scores = (q @ ht) * (1.0 / np.sqrt(dim))
    amask = None if mask is None else np.asarray(mask, dtype=bool)[:, None, :]
    a = nx.softmax(scores, axis=-1, mask=amask)
    return a, a @ h


def readout(z_gene, r: ReadoutParams, eps: float = 1e-5):
    """Per-gene scalar Softplus(w2^T ReLU(w1^T LN(z_g))) with weights shared over genes."""
    z = nx.as_tensor(z_gene)
    pre = nx.relu(nx.layer_norm(z, eps) @ r.w1) @ r.w2
    y = pre.reshape(*z.shape[:-1])
    return nx.softplus(y) if r.use_softplus else y


def deconvolve(a, y_spot):
    """Cell-level expression A[g, i] * y[g], returned cells x genes.

    Accepts arrays (G x N, G) or batched tensors (B x G x N, B x G).
    """
    if isinstance(a, nx.Tensor) or isinstance(y_spot, nx.Tensor):
        a, y = nx.as_tensor(a), nx.as_tensor(y_spot)
        if a.ndim == 2:
            return nx.transpose(a) * y.reshape(1, -1)
        b, g, _ = a.shape
        return nx.transpose(a, (0, 2, 1)) * y.reshape(b, 1, g)
    a = np.asarray(a, dtype=np.float64)
    y = np.asarray(y_spot, dtype=np.float64)
    return np.swapaxes(a, -1, -2) * y[..., None, :]
