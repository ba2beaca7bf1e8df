"""Learnable coordinate embeddings and the pre-norm transformer encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bitro import numerics as nx

PROJECTIONS = ("q", "k", "v", "o", "ffn_in", "ffn_out")


@dataclass
class PosTables:
    emb_x: object  # n_pos x D/2
    emb_y: object
    extent: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax

    @property
    def n_pos(self) -> int:
        return nx.as_tensor(self.emb_x).shape[0]


def quantize(coords: np.ndarray, extent, n_pos: int) -> tuple[np.ndarray, np.ndarray, int]:
    """Uniform bins over the extent; returns (ix, iy, number of clamped cells)."""
    coords = np.asarray(coords, dtype=np.float64)
    xmin, ymin, xmax, ymax = extent
    out = []
    clamped = np.zeros(len(coords), dtype=bool)
    for col, lo, hi in ((0, xmin, xmax), (1, ymin, ymax)):
        span = hi - lo if hi > lo else 1.0
        raw = np.floor((coords[:, col] - lo) / span * n_pos)
        clamped |= (coords[:, col] < lo) | (coords[:, col] > hi)
        out.append(np.clip(raw, 0, n_pos - 1).astype(np.intp))
    return out[0], out[1], int(clamped.sum())


def positional_embed(coords, t: PosTables):
    ix, iy, _ = quantize(coords, t.extent, t.n_pos)
    return nx.concat([nx.take(t.emb_x, ix), nx.take(t.emb_y, iy)], axis=-1)


@dataclass
class TransformerParams:
    layers: list[dict]
    heads: int

    @classmethod
    def from_weights(cls, weights, depth: int, heads: int) -> "TransformerParams":
        return cls([{k: weights[f"trf.{l}.{k}"] for k in PROJECTIONS} for l in range(depth)], heads)


def self_attention(x, layer: dict, heads: int, key_mask=None, return_weights: bool = False):
    """Multi-head scaled dot-product attention over axis -2 of (S, L, D)."""
    s, n, dim = x.shape
    dh = dim // heads

    def split(t):
        return nx.transpose(t.reshape(s, n, heads, dh), (0, 2, 1, 3))

    q, k, v = (split(x @ layer[name]) for name in ("q", "k", "v"))
    scores = (q @ nx.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    mask = None if key_mask is None else key_mask[:, None, None, :]
    weights = nx.softmax(scores, axis=-1, mask=mask)
    out = nx.transpose(weights @ v, (0, 2, 1, 3)).reshape(s, n, dim) @ layer["o"]
    if return_weights:
        return out, weights
    return out


def transformer_block(x, layer: dict, heads: int, key_mask=None, eps: float = 1e-5,
                      dropout: float = 0.0, rng=None):
    x = x + nx.dropout(self_attention(nx.layer_norm(x, eps), layer, heads, key_mask), dropout, rng)
    ff = nx.relu(nx.layer_norm(x, eps) @ layer["ffn_in"]) @ layer["ffn_out"]
    return x + nx.dropout(ff, dropout, rng)


def transformer_encode(h, s, p: TransformerParams, key_mask: np.ndarray | None = None,
                       eps: float = 1e-5, dropout: float = 0.0, rng=None):
    """Encode tokens h + s.  Accepts one N x D sequence or padded S x L x D
    batches with a boolean ``key_mask`` marking real tokens."""
    h, s = nx.as_tensor(h), nx.as_tensor(s)
    if h.shape != s.shape:
        raise nx.ShapeError(f"features {h.shape} and positions {s.shape} differ")
    single = h.ndim == 2
    x = h + s
    if single:
        x = x.reshape(1, *x.shape)
    if x.shape[-1] % p.heads:
        raise nx.ShapeError(f"width {x.shape[-1]} not divisible by {p.heads} heads")
    for layer in p.layers:
        x = transformer_block(x, layer, p.heads, key_mask, eps, dropout, rng)
    if single:
        x = x.reshape(*h.shape)
    return x
