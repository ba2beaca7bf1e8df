"""Composite objective, early stopping and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from bitro import numerics as nx
from bitro.cluster import cluster_loss
from bitro.model import Batch, ModelConfig, PreparedBag, collate, forward, model_config
from bitro.train.lora import JointParams, LoraAdapter, resolve_weights
from bitro.train.params import ParamTree

log = logging.getLogger(__name__)

LR_GRID = (1e-3, 5e-4, 1e-4, 1e-5)
DROPOUT_GRID = (0.0, 0.1, 0.2)
MAX_EPOCHS = 100
PATIENCE = 6
CLIP_NORM = 1.0
DEFAULT_LAMBDA = 0.3


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = MAX_EPOCHS
    patience: int = PATIENCE
    clip: float = CLIP_NORM
    lam: float = DEFAULT_LAMBDA
    dropout: float = 0.0
    seed: int = 0
    batch_size: int | None = None  # None: 32 bags for spot tasks, 1 for bulk

    def __post_init__(self):
        if not any(math.isclose(self.lr, v) for v in LR_GRID):
            raise ValueError(f"lr must be one of {LR_GRID}, got {self.lr}")
        if not 0 <= self.epochs <= MAX_EPOCHS:
            raise ValueError(f"epochs must lie in [0, {MAX_EPOCHS}]")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.clip <= 0:
            raise ValueError("clip must be positive")
        if self.lam != 0 and not 0.1 <= self.lam <= 0.5:
            raise ValueError("lambda must be 0 (regularizer off) or within [0.1, 0.5]")
        if not any(math.isclose(self.dropout, v) for v in DROPOUT_GRID):
            raise ValueError(f"dropout must be one of {DROPOUT_GRID}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def resolved_batch_size(self, task: str) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 1 if task == "bulk" else 32

    def to_dict(self) -> dict:
        return asdict(self)


def gene_loss(pred, target) -> nx.Tensor:
    """(1/M) sum_m ||pred_m - target_m||^2."""
    pred = nx.as_tensor(pred)
    return nx.square(pred - np.asarray(target)).sum() * (1.0 / pred.shape[0])


def total_loss(pred, target, y_cell=None, labels=None, lam: float = DEFAULT_LAMBDA) -> nx.Tensor:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    loss = gene_loss(pred, target)
    if lam == 0 or y_cell is None or labels is None:
        return loss
    return loss + lam * cluster_loss(y_cell, labels)


class EarlyStopping:
    """Stop once the monitored value has not improved for ``patience`` epochs."""

    def __init__(self, patience: int = PATIENCE):
        self.patience = patience
        self.best = math.inf
        self.best_epoch: int | None = None
        self.bad_epochs = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record ``value`` for ``epoch``; returns True when training should stop."""
        if value < self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    @property
    def improved_last(self) -> bool:
        return self.bad_epochs == 0


@dataclass
class FitResult:
    tree: ParamTree
    adapter: LoraAdapter | None
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = math.inf
    stopped_epoch: int = 0

    def val_losses(self) -> list[float]:
        return [row["val_loss"] for row in self.history]


def batches(bags: list[PreparedBag], size: int, order: np.ndarray | None = None):
    order = np.arange(len(bags)) if order is None else order
    for lo in range(0, len(order), size):
        yield collate([bags[i] for i in order[lo:lo + size]])


def predict(tree: ParamTree, bags: list[PreparedBag], adapter: LoraAdapter | None = None,
            batch_size: int = 32, with_attention: bool = False):
    """Predictions (M x G) in the model's target space, plus per-bag attention maps."""
    cfg = model_config(tree)
    weights, _ = resolve_weights(tree, adapter, train=False)
    preds, attn = [], []
    for batch in batches(bags, batch_size):
        out = forward(weights, cfg, batch)
        preds.append(out.pred.data)
        if with_attention:
            attn.extend(out.attention.data[i, :, :b.n].copy() for i, b in enumerate(batch.bags))
    pred = np.concatenate(preds) if preds else np.zeros((0, cfg.n_genes))
    return (pred, attn) if with_attention else pred


def evaluate_loss(tree: ParamTree, bags: list[PreparedBag], adapter: LoraAdapter | None = None,
                  batch_size: int = 32) -> float:
    """Mean per-bag squared error, the validation criterion."""
    pred = predict(tree, bags, adapter, batch_size)
    target = np.stack([b.target for b in bags])
    return float(np.sum((pred - target) ** 2) / len(bags))


def _step_loss(weights, cfg: ModelConfig, batch: Batch, tc: TrainConfig, rng) -> nx.Tensor:
    out = forward(weights, cfg, batch, tc.dropout, rng if tc.dropout > 0 else None)
    y_cell = out.cell_expression() if tc.lam > 0 and batch.labels is not None else None
    return total_loss(out.pred, batch.targets, y_cell, batch.labels, tc.lam)


def fit(tree: ParamTree, train_bags: list[PreparedBag], val_bags: list[PreparedBag],
        tc: TrainConfig, adapter: LoraAdapter | None = None, callback=None) -> FitResult:
    """Adam with global-norm clipping; returns the best-validation weights."""
    if not train_bags or not val_bags:
        raise TrainingError("training and validation bags must both be non-empty")
    ids_train = {(b.sample_id, b.unit_id) for b in train_bags}
    if ids_train & {(b.sample_id, b.unit_id) for b in val_bags}:
        raise TrainingError("training and validation bags overlap")
    cfg = model_config(tree)
    tree = tree.copy()
    adapter = adapter.copy() if adapter is not None else None
    size = tc.resolved_batch_size(cfg.task)
    rng = np.random.default_rng(tc.seed)
    state = nx.AdamState(lr=tc.lr, clip_norm=tc.clip)
    params = JointParams(tree, adapter)

    val0 = evaluate_loss(tree, val_bags, adapter)
    result = FitResult(tree.copy(), adapter.copy() if adapter else None,
                       [{"epoch": 0, "train_loss": float("nan"), "val_loss": val0, "grad_norm": float("nan")}],
                       0, val0, 0)
    stopper = EarlyStopping(tc.patience)
    stopper.update(0, val0)
    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(len(train_bags))
        losses, norms = [], []
        for step, batch in enumerate(batches(train_bags, size, order)):
            weights, leaves = resolve_weights(tree, adapter)
            loss = _step_loss(weights, cfg, batch, tc, rng)
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            grads = nx.backward(loss, leaves)
            norms.append(nx.adam_step(params, grads, state))
            losses.append(float(loss.data) * len(batch.bags))
        val = evaluate_loss(tree, val_bags, adapter)
        row = {"epoch": epoch, "train_loss": sum(losses) / len(train_bags), "val_loss": val,
               "grad_norm": float(np.mean(norms))}
        result.history.append(row)
        stop = stopper.update(epoch, val)
        if stopper.improved_last:
            result.tree, result.adapter = tree.copy(), adapter.copy() if adapter else None
            result.best_epoch, result.best_val = epoch, val
        log.info("epoch %d train %.5g val %.5g", epoch, row["train_loss"], val)
        result.stopped_epoch = epoch
        if callback is not None:
            callback(row)
        if stop:
            break
    return result
