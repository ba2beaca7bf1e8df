"""Low-rank adapters over frozen 2-D weights."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from bitro import numerics as nx
from bitro.train.params import ParamTree

DEFAULT_RANK = 8
DEFAULT_ALPHA = 16.0


class ConfigError(ValueError):
    pass


@dataclass
class LoraAdapter:
    """W_eff = W + (alpha / rank) * up @ down for every target W (d x k)."""

    rank: int
    alpha: float
    up: dict[str, np.ndarray] = field(default_factory=dict)  # d x r
    down: dict[str, np.ndarray] = field(default_factory=dict)  # r x k

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def targets(self) -> list[str]:
        return list(self.up)

    def delta(self, name: str) -> np.ndarray:
        return self.scale * (self.up[name] @ self.down[name])

    def n_values(self) -> int:
        return sum(self.up[t].size + self.down[t].size for t in self.targets)

    # ParamTree-like surface so the optimizer can update adapters directly
    def names(self) -> list[str]:
        return [f"lora.{t}.{part}" for t in self.targets for part in ("up", "down")]

    def _split(self, name: str) -> tuple[dict, str]:
        target, part = name[len("lora."):].rsplit(".", 1)
        return (self.up if part == "up" else self.down), target

    def get(self, name: str) -> np.ndarray:
        store, target = self._split(name)
        return store[target]

    def set(self, name: str, value) -> None:
        store, target = self._split(name)
        store[target] = np.asarray(value, dtype=nx.DTYPE)

    def is_trainable(self, name: str) -> bool:
        return True

    def row_mask(self, name: str):
        return None

    def meta(self) -> dict:
        return {"rank": self.rank, "alpha": self.alpha, "targets": self.targets}

    def tensors(self) -> dict[str, np.ndarray]:
        out = {n: self.get(n) for n in self.names()}
        out["lora.meta"] = np.array([float(self.rank), float(self.alpha)])
        return out

    @classmethod
    def from_tensors(cls, meta: dict, tensors: dict[str, np.ndarray]) -> "LoraAdapter":
        ad = cls(int(meta["rank"]), float(meta["alpha"]))
        for t in meta["targets"]:
            ad.up[t] = tensors[f"lora.{t}.up"]
            ad.down[t] = tensors[f"lora.{t}.down"]
        return ad

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.rank, self.alpha, {k: v.copy() for k, v in self.up.items()},
                           {k: v.copy() for k, v in self.down.items()})


def attach_lora(tree: ParamTree, targets: list[str] | None = None, rank: int = DEFAULT_RANK,
                alpha: float = DEFAULT_ALPHA, seed: int = 0) -> tuple[ParamTree, LoraAdapter]:
    """Freeze every base tensor and add zero-delta adapters on ``targets``."""
    from bitro.model import lora_target_names

    targets = lora_target_names(tree) if targets is None else list(targets)
    unknown = [t for t in targets if t not in tree]
    if unknown:
        raise ConfigError(f"unknown LoRA target(s): {', '.join(unknown)}")
    bad = [t for t in targets if tree.get(t).ndim != 2]
    if bad:
        raise ConfigError(f"LoRA targets must be matrices: {', '.join(bad)}")
    if rank < 1:
        raise ConfigError("LoRA rank must be >= 1")
    frozen = tree.copy()
    frozen.freeze("*")
    rng = np.random.default_rng(seed)
    ad = LoraAdapter(rank, float(alpha))
    for t in targets:
        d, k = tree.get(t).shape
        ad.up[t] = np.zeros((d, rank))
        ad.down[t] = rng.normal(0.0, 1.0 / np.sqrt(k), size=(rank, k))
    return frozen, ad


def resolve_weights(tree: ParamTree, adapter: LoraAdapter | None = None, train: bool = True):
    """Forward weights plus the trainable leaves they depend on.

    Returns ``(weights, leaves)``: ``weights`` maps every base name to the
    tensor the model should use; ``leaves`` maps trainable names (base and
    adapter) to the autodiff leaves whose gradients the optimizer needs.
    With ``train=False`` nothing records a graph.
    """
    if not train:
        base = {n: nx.Tensor(tree.get(n)) for n in tree.names()}
        weights = dict(base)
        if adapter is not None:
            for t in adapter.targets:
                weights[t] = base[t] + adapter.scale * (nx.Tensor(adapter.up[t]) @ nx.Tensor(adapter.down[t]))
        return weights, {}
    base = tree.leaves()
    weights: dict[str, nx.Tensor] = dict(base)
    leaves = {n: t for n, t in base.items() if tree.is_trainable(n)}
    if adapter is not None:
        for t in adapter.targets:
            up = nx.Tensor(adapter.up[t], requires_grad=True, name=f"lora.{t}.up")
            down = nx.Tensor(adapter.down[t], requires_grad=True, name=f"lora.{t}.down")
            leaves[up.name], leaves[down.name] = up, down
            weights[t] = base[t] + adapter.scale * (up @ down)
    return weights, leaves


def merge(tree: ParamTree, adapter: LoraAdapter) -> ParamTree:
    """Fold adapter deltas into the base weights; the result is fully trainable."""
    out = tree.copy()
    for t in adapter.targets:
        out.set(t, tree.get(t) + adapter.scale * (adapter.up[t] @ adapter.down[t]))
    for n in out.names():
        out.set_row_mask(n, None)
        out.set_trainable(n, not n.startswith(("pca.", "norm.", "cluster.")))
    return out


class JointParams:
    """Optimizer view over a ParamTree and an optional adapter."""

    def __init__(self, tree: ParamTree, adapter: LoraAdapter | None = None):
        self.tree, self.adapter = tree, adapter

    def _owner(self, name: str):
        return self.adapter if name.startswith("lora.") else self.tree

    def names(self) -> list[str]:
        return self.tree.names() + (self.adapter.names() if self.adapter else [])

    def get(self, name):
        return self._owner(name).get(name)

    def set(self, name, value):
        self._owner(name).set(name, value)

    def is_trainable(self, name):
        return self._owner(name).is_trainable(name)

    def row_mask(self, name):
        return self._owner(name).row_mask(name)
