"""kNN spatial graphs over cell centroids and the multi-head GAT encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bitro import numerics as nx
from bitro.numerics import Tensor

BRUTE_FORCE_LIMIT = 20_000
LEAKY_SLOPE = 0.2


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class SpatialGraph:
    n: int
    neighbors: np.ndarray  # (n, min(k, n-1)) node indices, nearest first

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]

    def table(self, width: int | None = None) -> "NeighborTable":
        """Self-loop first, then neighbors, padded to ``1 + width`` columns."""
        width = self.k if width is None else width
        idx = np.repeat(np.arange(self.n)[:, None], 1 + width, axis=1)
        mask = np.zeros((self.n, 1 + width), dtype=bool)
        mask[:, 0] = True
        idx[:, 1:1 + self.k] = self.neighbors
        mask[:, 1:1 + self.k] = True
        return NeighborTable(idx, mask)


@dataclass(frozen=True)
class NeighborTable:
    """Attention neighborhoods N(i) + {i} as a padded index table."""

    index: np.ndarray  # (N, 1 + k) int
    mask: np.ndarray  # (N, 1 + k) bool; padding columns are False

    @property
    def n(self) -> int:
        return self.index.shape[0]

    @staticmethod
    def singleton(n: int, width: int) -> "NeighborTable":
        idx = np.repeat(np.arange(n)[:, None], 1 + width, axis=1)
        mask = np.zeros((n, 1 + width), dtype=bool)
        mask[:, 0] = True
        return NeighborTable(idx, mask)

    @staticmethod
    def stack(tables: list["NeighborTable"]) -> "NeighborTable":
        """Block-diagonal union; node indices of later tables are offset."""
        width = max(t.index.shape[1] for t in tables)
        idx, mask, offset = [], [], 0
        for t in tables:
            pad = width - t.index.shape[1]
            ti = t.index + offset
            if pad:
                ti = np.concatenate([ti, np.repeat(ti[:, :1], pad, axis=1)], axis=1)
                tm = np.concatenate([t.mask, np.zeros((t.n, pad), dtype=bool)], axis=1)
            else:
                tm = t.mask
            idx.append(ti)
            mask.append(tm)
            offset += t.n
        return NeighborTable(np.concatenate(idx), np.concatenate(mask))

    def permuted(self, perm: np.ndarray) -> "NeighborTable":
        """Table for nodes reordered so that new node i is old node perm[i]."""
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return NeighborTable(inv[self.index[perm]], self.mask[perm])


def _knn_brute(coords: np.ndarray, k: int) -> np.ndarray:
    n = len(coords)
    out = np.empty((n, k), dtype=np.intp)
    step = max(1, 2_000_000 // max(n, 1))
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        dx = coords[lo:hi, None, 0] - coords[None, :, 0]
        dy = coords[lo:hi, None, 1] - coords[None, :, 1]
        d2 = dx * dx + dy * dy
        d2[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
        # stable sort keeps the lower index first among equal distances
        out[lo:hi] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return out


def _knn_tree(coords: np.ndarray, k: int) -> np.ndarray:
    from scipy.spatial import cKDTree

    tree = cKDTree(coords)
    dist, _ = tree.query(coords, k=k + 1)
    radius = dist[:, -1]
    out = np.empty((len(coords), k), dtype=np.intp)
    for i, r in enumerate(radius):
        # every point within the k-th distance, so ties resolve by index
        cand = np.asarray(tree.query_ball_point(coords[i], r * (1 + 1e-12) + 1e-300), dtype=np.intp)
        cand = cand[cand != i]
        d = coords[cand] - coords[i]
        d2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]
        order = np.lexsort((cand, d2))
        out[i] = cand[order[:k]]
    return out


def build_knn_graph(coords, k: int = 8) -> SpatialGraph:
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise GraphError(f"coords must be N x 2, got {coords.shape}")
    n = len(coords)
    if n < 2:
        raise GraphError(f"kNN graph needs at least 2 nodes, got {n}")
    if k < 1:
        raise GraphError(f"k must be >= 1, got {k}")
    keff = min(k, n - 1)
    nbrs = _knn_brute(coords, keff) if n <= BRUTE_FORCE_LIMIT else _knn_tree(coords, keff)
    return SpatialGraph(n, nbrs)


def patch_graph_table(coords: np.ndarray, k: int, patch_ids: np.ndarray | None = None) -> NeighborTable:
    """Neighbor table where graphs never cross patch boundaries.

    Cells are returned in their original order; each patch gets its own kNN
    graph and single-cell patches keep only the self-loop.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = len(coords)
    idx = np.repeat(np.arange(n)[:, None], 1 + k, axis=1)
    mask = np.zeros((n, 1 + k), dtype=bool)
    mask[:, 0] = True
    groups = [np.arange(n)] if patch_ids is None else [
        np.flatnonzero(patch_ids == p) for p in np.unique(patch_ids)]
    for members in groups:
        if len(members) < 2:
            continue
        g = build_knn_graph(coords[members], k)
        idx[members, 1:1 + g.k] = members[g.neighbors]
        mask[members, 1:1 + g.k] = True
    return NeighborTable(idx, mask)


@dataclass
class GatLayerParams:
    w: list  # per head: D_in x (D_out / heads)
    a: list  # per head: 2 * (D_out / heads)
    out_proj: object  # D_out x D_out

    @property
    def heads(self) -> int:
        return len(self.w)

    @classmethod
    def from_weights(cls, weights, layer: int, heads: int) -> "GatLayerParams":
        return cls(
            w=[weights[f"gat.{layer}.head{h}.w"] for h in range(heads)],
            a=[weights[f"gat.{layer}.head{h}.a"] for h in range(heads)],
            out_proj=weights[f"gat.{layer}.out_proj"],
        )


def gat_layer(h, g, p: GatLayerParams, eps: float = 1e-5, slope: float = LEAKY_SLOPE,
              return_attention: bool = False):
    """ReLU(LN(out_proj(concat_h sum_j alpha_ij W_h h_j))) over N(i) + {i}."""
    h = nx.as_tensor(h)
    table = g.table() if isinstance(g, SpatialGraph) else g
    if h.ndim != 2 or h.shape[0] != table.n:
        raise nx.ShapeError(f"features {h.shape} do not match a graph of {table.n} nodes")
    heads = p.heads
    w_all = nx.concat([nx.as_tensor(w) for w in p.w], axis=1)
    if w_all.shape[0] != h.shape[1]:
        raise nx.ShapeError(f"GAT weight expects width {w_all.shape[0]}, features have {h.shape[1]}")
    d = w_all.shape[1] // heads
    n = h.shape[0]
    wh = (h @ w_all).reshape(n, heads, d)
    a_src = nx.concat([nx.as_tensor(a)[:d].reshape(1, d) for a in p.a], axis=0)
    a_dst = nx.concat([nx.as_tensor(a)[d:].reshape(1, d) for a in p.a], axis=0)
    s_src = (wh * a_src).sum(axis=-1)  # (N, H)
    s_dst = (wh * a_dst).sum(axis=-1)
    e = nx.leaky_relu(s_src.reshape(n, 1, heads) + nx.take(s_dst, table.index), slope)
    alpha = nx.softmax(e, axis=1, mask=table.mask[:, :, None])  # (N, 1+k, H)
    msgs = nx.take(wh, table.index)  # (N, 1+k, H, d)
    agg = (alpha.reshape(n, table.index.shape[1], heads, 1) * msgs).sum(axis=1)
    out = nx.relu(nx.layer_norm(agg.reshape(n, heads * d) @ p.out_proj, eps))
    if return_attention:
        return out, alpha
    return out


def gat_encode(h, g, layers: list[GatLayerParams], eps: float = 1e-5):
    out = nx.as_tensor(h)
    table = g.table() if isinstance(g, SpatialGraph) else g
    for p in layers:
        out = gat_layer(out, table, p, eps)
    return out
