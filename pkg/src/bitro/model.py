"""End-to-end model: GAT -> positional transformer -> gene-query pooling -> readout.

Bags of different sizes are batched without per-bag Python loops: GAT runs
on the block-diagonal union of all cells, the transformer on padded token
windows, and pooling on padded bags with masks.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from bitro import numerics as nx
from bitro.encoder import PROJECTIONS, TransformerParams, quantize, transformer_encode
from bitro.graph import GatLayerParams, NeighborTable, gat_encode, patch_graph_table
from bitro.ingest.bags import Bag
from bitro.ingest.tables import CellTable
from bitro.mil import ReadoutParams, deconvolve, pool, readout
from bitro.train.params import ParamTree

DEFAULT_DIM = 128
DEFAULT_WINDOW = 4096


@dataclass
class ModelConfig:
    d_in: int
    genes: list[str]
    dim: int = DEFAULT_DIM
    gat_layers: int = 2
    gat_heads: int = 4
    k_neighbors: int = 8
    n_pos: int = 1024
    trf_depth: int = 2
    trf_heads: int = 4
    ff_mult: int = 4
    hidden: int | None = None  # readout width, defaults to dim
    use_softplus: bool = False
    ln_eps: float = 1e-5
    window: int = DEFAULT_WINDOW
    extent: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)
    task: str = "spot"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.genes = list(self.genes)
        self.extent = tuple(float(v) for v in self.extent)
        if self.dim % 2:
            raise nx.ContractError("model width must be even (two positional halves)")
        if self.dim % self.gat_heads or self.dim % self.trf_heads:
            raise nx.ContractError("model width must be divisible by the head counts")
        if self.gat_layers == 0 and self.d_in != self.dim:
            raise nx.ContractError("without GAT layers the input width must equal the model width")

    @property
    def n_genes(self) -> int:
        return len(self.genes)

    @property
    def readout_hidden(self) -> int:
        return self.hidden or self.dim

    def to_header(self) -> dict:
        return asdict(self)

    @classmethod
    def from_header(cls, header: dict) -> "ModelConfig":
        keys = cls.__dataclass_fields__
        return cls(**{k: v for k, v in header.items() if k in keys})


def _glorot(rng, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=shape or (fan_in, fan_out))


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamTree:
    rng = np.random.default_rng(seed)
    tree = ParamTree(cfg.to_header())
    d, heads = cfg.dim, cfg.gat_heads
    dh = d // heads
    for l in range(cfg.gat_layers):
        d_in = cfg.d_in if l == 0 else d
        for h in range(heads):
            tree.add(f"gat.{l}.head{h}.w", _glorot(rng, d_in, dh))
            tree.add(f"gat.{l}.head{h}.a", _glorot(rng, 2 * dh, 1, (2 * dh,)))
        tree.add(f"gat.{l}.out_proj", _glorot(rng, d, d))
    tree.add("pos.emb_x", rng.normal(0.0, 0.02, size=(cfg.n_pos, d // 2)))
    tree.add("pos.emb_y", rng.normal(0.0, 0.02, size=(cfg.n_pos, d // 2)))
    ff = cfg.ff_mult * d
    for l in range(cfg.trf_depth):
        for name in ("q", "k", "v", "o"):
            tree.add(f"trf.{l}.{name}", _glorot(rng, d, d))
        tree.add(f"trf.{l}.ffn_in", _glorot(rng, d, ff))
        tree.add(f"trf.{l}.ffn_out", _glorot(rng, ff, d))
    tree.add("mil.q_gene", rng.normal(0.0, 1.0 / np.sqrt(d), size=(cfg.n_genes, d)))
    tree.add("mil.w1", _glorot(rng, d, cfg.readout_hidden))
    tree.add("mil.w2", _glorot(rng, cfg.readout_hidden, 1))
    return tree


def model_config(tree: ParamTree) -> ModelConfig:
    return ModelConfig.from_header(tree.header)


# ---------------------------------------------------------------------------
# bag preparation and batching


@dataclass
class PreparedBag:
    """Everything the forward pass needs for one bag, precomputed once."""

    unit_id: str
    sample_id: str
    cell_ids: np.ndarray
    coords: np.ndarray
    features: np.ndarray
    table: NeighborTable
    ix: np.ndarray
    iy: np.ndarray
    chunks: list[np.ndarray]
    target: np.ndarray | None = None
    labels: np.ndarray | None = None
    unit_coord: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.cell_ids)


def _chunks(coords: np.ndarray, patch_ids: np.ndarray | None, window: int) -> list[np.ndarray]:
    n = len(coords)
    if n <= window:
        return [np.arange(n)]
    keys = (np.arange(n), coords[:, 0], coords[:, 1]) if patch_ids is None else \
        (np.arange(n), coords[:, 0], coords[:, 1], patch_ids)
    order = np.lexsort(keys)
    return [np.sort(c) for c in np.array_split(order, int(np.ceil(n / window)))]


def prepare_bag(cells: CellTable, bag: Bag, cfg: ModelConfig, labels: np.ndarray | None = None) -> PreparedBag:
    idx = bag.member_cell_indices
    coords = cells.coords[idx]
    feats = cells.features[idx]
    if feats.shape[1] != cfg.d_in:
        raise nx.ShapeError(f"bag {bag.unit_id}: features have width {feats.shape[1]}, model expects {cfg.d_in}")
    table = patch_graph_table(coords, cfg.k_neighbors, bag.patch_ids)
    ix, iy, _ = quantize(coords, cfg.extent, cfg.n_pos)
    return PreparedBag(
        unit_id=bag.unit_id, sample_id=cells.sample_id, cell_ids=cells.cell_ids[idx],
        coords=coords, features=feats, table=table, ix=ix, iy=iy,
        chunks=_chunks(coords, bag.patch_ids, cfg.window), target=bag.target,
        labels=None if labels is None else np.asarray(labels)[idx], unit_coord=bag.unit_coord,
    )


@dataclass
class Batch:
    bags: list[PreparedBag]
    features: np.ndarray  # (Ntot, d_in)
    table: NeighborTable
    ix: np.ndarray
    iy: np.ndarray
    seq_index: np.ndarray  # (S, Lmax) flat cell indices
    seq_mask: np.ndarray
    seq_back: np.ndarray  # (Ntot,) position of each cell in the flattened (S * Lmax)
    bag_index: np.ndarray  # (B, Nmax)
    bag_mask: np.ndarray
    valid: np.ndarray  # (Ntot,) position of each cell in the flattened (B * Nmax)
    targets: np.ndarray | None
    labels: np.ndarray | None


def collate(bags: list[PreparedBag]) -> Batch:
    sizes = np.array([b.n for b in bags])
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    seqs = [c + off for b, off in zip(bags, offsets) for c in b.chunks]
    lmax = max(len(s) for s in seqs)
    seq_index = np.zeros((len(seqs), lmax), dtype=np.intp)
    seq_mask = np.zeros((len(seqs), lmax), dtype=bool)
    seq_back = np.empty(int(sizes.sum()), dtype=np.intp)
    for i, s in enumerate(seqs):
        seq_index[i, :len(s)] = s
        seq_index[i, len(s):] = s[0]
        seq_mask[i, :len(s)] = True
        seq_back[s] = i * lmax + np.arange(len(s))
    nmax = int(sizes.max())
    bag_index = np.zeros((len(bags), nmax), dtype=np.intp)
    bag_mask = np.zeros((len(bags), nmax), dtype=bool)
    valid = np.empty(int(sizes.sum()), dtype=np.intp)
    for i, (n, off) in enumerate(zip(sizes, offsets)):
        bag_index[i, :n] = off + np.arange(n)
        bag_index[i, n:] = off
        bag_mask[i, :n] = True
        valid[off:off + n] = i * nmax + np.arange(n)
    has_targets = all(b.target is not None for b in bags)
    has_labels = all(b.labels is not None for b in bags)
    return Batch(
        bags=bags,
        features=np.concatenate([b.features for b in bags]),
        table=NeighborTable.stack([b.table for b in bags]),
        ix=np.concatenate([b.ix for b in bags]),
        iy=np.concatenate([b.iy for b in bags]),
        seq_index=seq_index, seq_mask=seq_mask, seq_back=seq_back,
        bag_index=bag_index, bag_mask=bag_mask, valid=valid,
        targets=np.stack([b.target for b in bags]) if has_targets else None,
        labels=np.concatenate([b.labels for b in bags]) if has_labels else None,
    )


# ---------------------------------------------------------------------------
# forward


@dataclass
class ForwardOut:
    pred: nx.Tensor  # (B, G)
    attention: nx.Tensor  # (B, G, Nmax), zero on padding
    batch: Batch

    def cell_expression(self) -> nx.Tensor:
        """Deconvolved cell x gene predictions in flat cell order."""
        b, g, nmax = self.attention.shape
        y = deconvolve(self.attention, self.pred).reshape(b * nmax, g)
        return nx.take(y, self.batch.valid)


def forward(weights, cfg: ModelConfig, batch: Batch, dropout: float = 0.0,
            rng: np.random.Generator | None = None) -> ForwardOut:
    h = nx.Tensor(batch.features)
    layers = [GatLayerParams.from_weights(weights, l, cfg.gat_heads) for l in range(cfg.gat_layers)]
    h = gat_encode(h, batch.table, layers, cfg.ln_eps)
    pos = nx.concat([nx.take(weights["pos.emb_x"], batch.ix), nx.take(weights["pos.emb_y"], batch.iy)], axis=-1)
    trf = TransformerParams.from_weights(weights, cfg.trf_depth, cfg.trf_heads)
    tokens = transformer_encode(nx.take(h, batch.seq_index), nx.take(pos, batch.seq_index), trf,
                                batch.seq_mask, cfg.ln_eps, dropout, rng)
    s, lmax, d = tokens.shape
    h_cell = nx.take(tokens.reshape(s * lmax, d), batch.seq_back)
    a, z = pool(nx.take(h_cell, batch.bag_index), weights["mil.q_gene"], batch.bag_mask)
    pred = readout(z, ReadoutParams(weights["mil.w1"], weights["mil.w2"], cfg.use_softplus), cfg.ln_eps)
    return ForwardOut(pred, a, batch)


def array_weights(tree: ParamTree) -> dict[str, nx.Tensor]:
    return {n: nx.Tensor(tree.get(n)) for n in tree.names()}


def predict_bag(weights, cfg: ModelConfig, bag: PreparedBag) -> tuple[np.ndarray, np.ndarray]:
    """Prediction (G,) and attention map (G x N) for one bag."""
    out = forward(weights, cfg, collate([bag]))
    return out.pred.data[0].copy(), out.attention.data[0, :, :bag.n].copy()


def lora_target_names(tree: ParamTree) -> list[str]:
    names = [f"trf.{l}.{p}" for l in range(model_config(tree).trf_depth) for p in PROJECTIONS]
    return [n for n in names + ["mil.q_gene", "mil.w1"] if n in tree]
