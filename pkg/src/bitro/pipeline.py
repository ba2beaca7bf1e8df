"""From loaded samples to model-ready bags, with train-split preprocessing.

The fitted preprocessing (PCA basis, z-score statistics, phenotype
centroids) travels inside the model's ParamTree as frozen entries so that a
checkpoint alone is enough to featurize new slides.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from bitro.cluster import assign, kmeans_fit
from bitro.ingest.bags import DEFAULT_MAX_CELLS, Bag, assign_cells_to_spots, grid_bulk_bags
from bitro.ingest.genes import NormStats, denormalize, normalize_expression, to_log1p
from bitro.ingest.manifest import DatasetDescriptor
from bitro.ingest.pca import PcaModel, apply_pca, fit_pca
from bitro.ingest.tables import CellTable, DatasetError, ExpressionFrame
from bitro.model import ModelConfig, PreparedBag, init_params, model_config, prepare_bag
from bitro.train.params import ParamTree

log = logging.getLogger(__name__)

KMEANS_MAX_CELLS = 100_000
STATE_PREFIXES = ("pca.", "norm.", "cluster.")


def worker_count() -> int:
    env = os.environ.get("BITRO_THREADS")
    if env:
        return max(1, int(env))
    return min(8, os.cpu_count() or 1)


@dataclass
class Sample:
    id: str
    cells: CellTable
    expr: ExpressionFrame
    task: str


def load_samples(desc: DatasetDescriptor, ids: list[str] | None = None) -> list[Sample]:
    entries = [s for s in desc.samples if ids is None or s.id in ids]

    def _load(entry):
        cells, expr = desc.load(entry)
        return Sample(entry.id, cells, expr, desc.task)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        return list(pool.map(_load, entries))


@dataclass
class Preprocessor:
    genes: list[str]
    task: str
    patch_px: float
    normalize: bool = True
    pca: PcaModel | None = None
    norm: NormStats | None = None
    centroids: np.ndarray | None = None
    max_cells: int = DEFAULT_MAX_CELLS
    seed: int = 0
    pca_mode: str = "shared"  # or "per_sample": every slide gets its own basis
    pca_dim: int | None = None

    @classmethod
    def fit(cls, train: list[Sample], genes: list[str] | None = None, *, patch_px: float,
            normalize: bool = True, pca_dim: int | None = None, n_clusters: int = 8,
            seed: int = 0, max_cells: int = DEFAULT_MAX_CELLS, pca_mode: str = "shared") -> "Preprocessor":
        """Fit PCA, z-score statistics and phenotype centroids on training samples only."""
        if not train:
            raise DatasetError("no training samples")
        if pca_mode not in ("shared", "per_sample"):
            raise DatasetError(f"unknown PCA mode {pca_mode!r}")
        genes = list(genes or train[0].expr.gene_names)
        pre = cls(genes, train[0].task, patch_px, normalize, max_cells=max_cells, seed=seed)
        feats = np.concatenate([s.cells.features for s in train])
        if pca_dim is not None and pca_dim < feats.shape[1]:
            pre.pca_dim = pca_dim
            if pca_mode == "shared":
                pre.pca = fit_pca(feats, pca_dim)
                feats = apply_pca(pre.pca, feats)
            else:
                pre.pca_mode = pca_mode
                feats = np.concatenate([pre.cell_features(s.cells).features for s in train])
        if normalize:
            pooled = np.concatenate([to_log1p(s.expr.select_genes(genes)).values for s in train])
            pre.norm = NormStats.fit(ExpressionFrame([str(i) for i in range(len(pooled))], pooled, genes,
                                                     space_tag="log1p"))
        if n_clusters > 0:
            if len(feats) > KMEANS_MAX_CELLS:
                rng = np.random.default_rng(seed)
                feats = feats[np.sort(rng.choice(len(feats), KMEANS_MAX_CELLS, replace=False))]
            pre.centroids = kmeans_fit(feats, n_clusters, seed=seed).centroids
        return pre

    # -- transforms -------------------------------------------------------

    def cell_features(self, cells: CellTable) -> CellTable:
        if self.pca_mode == "per_sample" and self.pca_dim is not None:
            return cells.with_features(apply_pca(fit_pca(cells.features, self.pca_dim), cells.features))
        if self.pca is None:
            return cells
        return cells.with_features(apply_pca(self.pca, cells.features))

    def target_frame(self, expr: ExpressionFrame) -> ExpressionFrame:
        """Expression in the space the model is trained on."""
        expr = expr.select_genes(self.genes)
        if self.normalize:
            return normalize_expression(expr, self.norm)[0]
        return to_log1p(expr)

    def to_expression(self, values: np.ndarray) -> np.ndarray:
        """Model-space values back to log1p expression."""
        if not self.normalize:
            return np.asarray(values)
        frame = ExpressionFrame([str(i) for i in range(len(values))], values, self.genes, space_tag="zscore")
        return denormalize(frame, self.norm).values

    def labels(self, cells: CellTable) -> np.ndarray | None:
        return None if self.centroids is None else assign(self.centroids, cells.features)

    def bags(self, sample: Sample, cells: CellTable | None = None) -> list[Bag]:
        target = self.target_frame(sample.expr)
        cells = cells or sample.cells
        if sample.task == "spot":
            return assign_cells_to_spots(cells, target, self.patch_px)
        if target.n_units != 1:
            raise DatasetError(f"{sample.id}: bulk samples need exactly one expression row")
        return [grid_bulk_bags(cells, self.patch_px, self.max_cells, self.seed,
                               target.values[0], unit_id=target.unit_ids[0])]

    def prepare(self, samples: list[Sample], cfg: ModelConfig) -> list[PreparedBag]:
        out = []
        for s in samples:
            cells = self.cell_features(s.cells)
            labels = self.labels(cells)
            out.extend(prepare_bag(cells, bag, cfg, labels) for bag in self.bags(s, cells))
        return out

    def feature_width(self, samples: list[Sample]) -> int:
        return self.pca_dim if self.pca_dim is not None else samples[0].cells.width

    # -- persistence inside a ParamTree ------------------------------------

    def attach(self, tree: ParamTree) -> None:
        for name in [n for n in tree.names() if n.startswith(STATE_PREFIXES)]:
            tree.remove(name)
        if self.pca is not None:
            tree.add("pca.mean", self.pca.mean, trainable=False)
            tree.add("pca.components", self.pca.components, trainable=False)
            tree.add("pca.explained_variance", self.pca.explained_variance, trainable=False)
        if self.norm is not None:
            tree.add("norm.mu", self.norm.mu, trainable=False)
            tree.add("norm.sigma", self.norm.sigma, trainable=False)
        if self.centroids is not None:
            tree.add("cluster.centroids", self.centroids, trainable=False)
        extra = dict(tree.header.get("extra", {}))
        extra.update({"normalize": self.normalize, "patch_px": self.patch_px,
                      "max_cells": self.max_cells, "prep_seed": self.seed,
                      "pca_total_variance": self.pca.total_variance if self.pca else None,
                      "norm_eps": self.norm.eps if self.norm else None,
                      "metric_space": "log1p", "pca_mode": self.pca_mode, "pca_dim": self.pca_dim})
        tree.header["extra"] = extra

    @classmethod
    def from_tree(cls, tree: ParamTree) -> "Preprocessor":
        cfg = model_config(tree)
        extra = cfg.extra
        pca = None
        if "pca.components" in tree:
            pca = PcaModel(tree.get("pca.mean"), tree.get("pca.components"),
                           tree.get("pca.explained_variance"), extra.get("pca_total_variance") or 0.0)
        norm = None
        if "norm.mu" in tree:
            norm = NormStats(cfg.genes, tree.get("norm.mu"), tree.get("norm.sigma"), extra["norm_eps"])
        centroids = tree.get("cluster.centroids") if "cluster.centroids" in tree else None
        return cls(cfg.genes, cfg.task, extra["patch_px"], extra["normalize"], pca, norm, centroids,
                   extra["max_cells"], extra["prep_seed"], extra.get("pca_mode", "shared"),
                   extra.get("pca_dim", pca.dim if pca is not None else None))

    def with_genes(self, genes: list[str], train: list[Sample]) -> "Preprocessor":
        """Same featurization, expression statistics refit for a new gene list."""
        out = replace(self, genes=list(genes), task=train[0].task)
        if self.normalize:
            pooled = np.concatenate([to_log1p(s.expr.select_genes(genes)).values for s in train])
            out.norm = NormStats.fit(ExpressionFrame([str(i) for i in range(len(pooled))], pooled,
                                                     list(genes), space_tag="log1p"))
        return out


def slide_extent(samples: list[Sample]) -> tuple[float, float, float, float]:
    coords = np.concatenate([s.cells.coords for s in samples])
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])


def new_model(pre: Preprocessor, train: list[Sample], seed: int = 0, use_softplus: bool | None = None,
              **arch) -> ParamTree:
    """Fresh model sized to the preprocessed features and gene list.

    Softplus defaults on for log1p targets and off for z-scored ones.
    """
    if use_softplus is None:
        use_softplus = not pre.normalize
    cfg = ModelConfig(d_in=pre.feature_width(train), genes=pre.genes, use_softplus=use_softplus,
                      extent=slide_extent(train), task=pre.task, **arch)
    tree = init_params(cfg, seed)
    pre.attach(tree)
    return tree


def split_train_val(bags: list[PreparedBag], frac: float = 0.1, seed: int = 0):
    """Seeded random hold-out of ``frac`` of the bags (at least one)."""
    if len(bags) < 2:
        raise DatasetError("need at least two bags to carve out a validation set")
    rng = np.random.default_rng(seed)
    n_val = min(len(bags) - 1, max(1, int(round(frac * len(bags)))))
    pick = set(rng.choice(len(bags), size=n_val, replace=False).tolist())
    return [b for i, b in enumerate(bags) if i not in pick], [b for i, b in enumerate(bags) if i in pick]


ARCH_KEYS = ("dim", "gat_layers", "gat_heads", "k_neighbors", "n_pos", "trf_depth", "trf_heads",
             "ff_mult", "hidden", "ln_eps", "window")


def arch_of(cfg: ModelConfig) -> dict:
    return {k: getattr(cfg, k) for k in ARCH_KEYS}


def train_from_scratch(train: list[Sample], tc, *, patch_px: float, genes: list[str] | None = None,
                       normalize: bool = True, pca_dim: int | None = 128, n_clusters: int = 8,
                       max_cells: int = DEFAULT_MAX_CELLS, use_softplus: bool | None = None,
                       val_frac: float = 0.1, arch: dict | None = None, callback=None,
                       pca_mode: str = "shared"):
    """Fit preprocessing and a fresh model on ``train``; returns ``(FitResult, Preprocessor)``."""
    from bitro.train.loop import fit

    pre = Preprocessor.fit(train, genes, patch_px=patch_px, normalize=normalize, pca_dim=pca_dim,
                           n_clusters=n_clusters, seed=tc.seed, max_cells=max_cells, pca_mode=pca_mode)
    tree = new_model(pre, train, tc.seed, use_softplus, **(arch or {}))
    bags = pre.prepare(train, model_config(tree))
    train_bags, val_bags = split_train_val(bags, val_frac, tc.seed)
    return fit(tree, train_bags, val_bags, tc, callback=callback), pre


@dataclass
class Predictions:
    sample_id: str
    unit_ids: list[str]
    unit_coords: np.ndarray | None
    y_true: np.ndarray | None  # log1p
    y_pred: np.ndarray  # log1p
    attention: list[np.ndarray]  # per bag, G x n
    bags: list[PreparedBag]


def predict_samples(tree: ParamTree, samples: list[Sample], adapter=None, batch_size: int = 32) -> list[Predictions]:
    """Per-sample predictions in log1p space, with attention maps for deconvolution."""
    from bitro.train.loop import predict

    pre = Preprocessor.from_tree(tree)
    cfg = model_config(tree)
    out = []
    for s in samples:
        bags = pre.prepare([s], cfg)
        pred, attn = predict(tree, bags, adapter, batch_size, with_attention=True)
        truth = np.stack([b.target for b in bags])
        coords = np.stack([b.unit_coord for b in bags]) if bags[0].unit_coord is not None else None
        out.append(Predictions(s.id, [b.unit_id for b in bags], coords, pre.to_expression(truth),
                               pre.to_expression(pred), attn, bags))
    return out
