"""Re-heading a pretrained model to a new gene list and finetuning it across tasks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bitro.model import model_config
from bitro.train.lora import DEFAULT_ALPHA, DEFAULT_RANK, LoraAdapter, attach_lora, merge
from bitro.train.loop import FitResult, TrainConfig, fit
from bitro.train.params import ParamTree

DIRECTIONS = {"st2bulk": "bulk", "bulk2st": "spot"}
STATE_PREFIXES = ("pca.", "norm.", "cluster.")


class TransferError(ValueError):
    pass


def rehead(tree: ParamTree, target_genes: list[str], seed: int = 0) -> tuple[ParamTree, np.ndarray]:
    """Gene-query table rebuilt for ``target_genes``.

    Rows of genes the model already knows are copied; the rest are drawn
    fresh. Returns the new tree and a boolean mask of the fresh rows.
    """
    cfg = model_config(tree)
    source = {g: i for i, g in enumerate(cfg.genes)}
    target_genes = list(target_genes)
    if not any(g in source for g in target_genes):
        raise TransferError("pretrained and target gene sets do not intersect")
    q_old = tree.get("mil.q_gene")
    rng = np.random.default_rng(seed)
    fresh = np.array([g not in source for g in target_genes])
    q_new = rng.normal(0.0, 1.0 / np.sqrt(cfg.dim), size=(len(target_genes), cfg.dim))
    for i, g in enumerate(target_genes):
        if g in source:
            q_new[i] = q_old[source[g]]
    if target_genes == cfg.genes:
        return tree.copy(), fresh
    out = ParamTree(dict(tree.header, genes=target_genes))
    for name in tree.names():
        value = q_new if name == "mil.q_gene" else tree.get(name)
        out.add(name, value, trainable=tree.is_trainable(name))
        if name != "mil.q_gene" and tree.row_mask(name) is not None:
            out.set_row_mask(name, tree.row_mask(name))
    return out, fresh


@dataclass
class TransferResult:
    fit: FitResult
    fresh_rows: np.ndarray

    @property
    def tree(self) -> ParamTree:
        return self.fit.tree

    @property
    def adapter(self) -> LoraAdapter | None:
        return self.fit.adapter

    def merged(self) -> ParamTree:
        if self.adapter is None:
            return self.tree
        return merge(self.tree, self.adapter)


def prepare_transfer(tree: ParamTree, target_genes: list[str], direction: str, lora: bool = True,
                     rank: int = DEFAULT_RANK, alpha: float = DEFAULT_ALPHA, targets=None,
                     seed: int = 0) -> tuple[ParamTree, LoraAdapter | None, np.ndarray]:
    """Re-head and set trainable flags for a finetune in ``direction``.

    With ``lora`` every base tensor is frozen except freshly initialized
    gene-query rows; without it the whole model (bar preprocessing state)
    trains.
    """
    if direction not in DIRECTIONS:
        raise TransferError(f"direction must be one of {sorted(DIRECTIONS)}, got {direction!r}")
    tree, fresh = rehead(tree, target_genes, seed)
    tree.header["task"] = DIRECTIONS[direction]
    if lora:
        tree, adapter = attach_lora(tree, targets, rank, alpha, seed)
        if fresh.any():
            tree.set_row_mask("mil.q_gene", fresh)
        return tree, adapter, fresh
    for name in tree.names():
        tree.set_row_mask(name, None)
        tree.set_trainable(name, not name.startswith(STATE_PREFIXES))
    return tree, None, fresh


def finetune(pretrained: ParamTree, target_genes: list[str], train_bags, val_bags, tc: TrainConfig,
             *, direction: str, lora: bool = True, rank: int = DEFAULT_RANK,
             alpha: float = DEFAULT_ALPHA, targets=None, callback=None) -> TransferResult:
    """Finetune on bags already prepared for ``target_genes`` in the target space."""
    tree, adapter, fresh = prepare_transfer(pretrained, target_genes, direction, lora, rank, alpha,
                                            targets, tc.seed)
    return TransferResult(fit(tree, train_bags, val_bags, tc, adapter, callback), fresh)


def transfer(pretrained: ParamTree, samples, tc: TrainConfig, *, direction: str, lora: bool = True,
             genes: list[str] | None = None, patch_px: float | None = None, val_frac: float = 0.1,
             rank: int = DEFAULT_RANK, alpha: float = DEFAULT_ALPHA, targets=None,
             callback=None) -> TransferResult:
    """Pretrained checkpoint + target-task samples -> finetuned model.

    Featurization (PCA basis, phenotype centroids) carries over from the
    pretrained model; expression statistics are refit on the target samples.
    """
    from bitro.pipeline import Preprocessor, split_train_val

    genes = list(genes or samples[0].expr.gene_names)
    if DIRECTIONS.get(direction) not in (None, samples[0].task):
        raise TransferError(f"direction {direction} expects {DIRECTIONS[direction]} samples, "
                            f"got {samples[0].task}")
    pre = Preprocessor.from_tree(pretrained).with_genes(genes, samples)
    if patch_px is not None:
        pre.patch_px = patch_px
    tree, adapter, fresh = prepare_transfer(pretrained, genes, direction, lora, rank, alpha, targets, tc.seed)
    pre.attach(tree)
    bags = pre.prepare(samples, model_config(tree))
    train_bags, val_bags = split_train_val(bags, val_frac, tc.seed)
    return TransferResult(fit(tree, train_bags, val_bags, tc, adapter, callback), fresh)
