"""Named parameter tensors and the binary checkpoint container."""

from __future__ import annotations

import fnmatch
import hashlib
import json
import struct
from pathlib import Path
from typing import Iterator

import numpy as np

from bitro.numerics import DTYPE, ContractError, Tensor

MAGIC = b"BITRO1"


class CheckpointError(ValueError):
    pass


class ParamTree:
    """Ordered name -> array store with per-entry trainable flags.

    ``header`` carries the architecture description plus any metadata the
    pipeline needs to reuse the model (gene names, coordinate extent, ...).
    A row mask restricts training of a 2-D entry to a subset of its rows.
    """

    def __init__(self, header: dict | None = None):
        self.header: dict = dict(header or {})
        self._data: dict[str, np.ndarray] = {}
        self._trainable: dict[str, bool] = {}
        self._rows: dict[str, np.ndarray] = {}

    def add(self, name: str, value, trainable: bool = True) -> None:
        if name in self._data:
            raise ContractError(f"duplicate parameter name {name!r}")
        self._data[name] = np.array(value, dtype=DTYPE)
        self._trainable[name] = trainable

    def remove(self, name: str) -> None:
        del self._data[name]
        del self._trainable[name]
        self._rows.pop(name, None)

    def names(self) -> list[str]:
        return list(self._data)

    def __contains__(self, name: str) -> bool:
        return name in self._data

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def get(self, name: str) -> np.ndarray:
        try:
            return self._data[name]
        except KeyError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def set(self, name: str, value: np.ndarray) -> None:
        old = self._data[name]
        value = np.asarray(value, dtype=DTYPE)
        if value.shape != old.shape:
            raise ContractError(f"{name}: shape {value.shape} != {old.shape}")
        self._data[name] = value

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, name: str, flag: bool) -> None:
        self._trainable[name] = flag
        if not flag:
            self._rows.pop(name, None)

    def row_mask(self, name: str) -> np.ndarray | None:
        return self._rows.get(name)

    def set_row_mask(self, name: str, rows: np.ndarray | None) -> None:
        if rows is None:
            self._rows.pop(name, None)
            return
        rows = np.asarray(rows, dtype=bool)
        if rows.shape != self._data[name].shape[:1]:
            raise ContractError(f"{name}: row mask length {rows.shape} mismatches")
        self._rows[name] = rows
        self._trainable[name] = bool(rows.any())

    def freeze(self, pattern: str = "*") -> None:
        for name in self._data:
            if fnmatch.fnmatchcase(name, pattern):
                self.set_trainable(name, False)

    def match(self, pattern: str) -> list[str]:
        return [n for n in self._data if fnmatch.fnmatchcase(n, pattern)]

    def copy(self) -> "ParamTree":
        out = ParamTree(json.loads(json.dumps(self.header)))
        for name, value in self._data.items():
            out._data[name] = value.copy()
            out._trainable[name] = self._trainable[name]
        out._rows = {k: v.copy() for k, v in self._rows.items()}
        return out

    def leaves(self) -> dict[str, Tensor]:
        """Fresh autodiff leaves; only trainable entries require gradients."""
        return {n: Tensor(v, requires_grad=self._trainable[n], name=n) for n, v in self._data.items()}

    def n_values(self, trainable_only: bool = False) -> int:
        return sum(v.size for n, v in self._data.items() if self._trainable[n] or not trainable_only)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self._data):
            h.update(name.encode())
            h.update(self._data[name].astype("<f8").tobytes())
        return h.hexdigest()


def _write_tensor(fh, name: str, value: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", value.ndim))
    fh.write(struct.pack(f"<{value.ndim}Q", *value.shape))
    fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint")
    return buf


def write_container(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name, value in tensors.items():
            _write_tensor(fh, name, value)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (n,) = struct.unpack("<Q", _read_exact(fh, 8))
        header = json.loads(_read_exact(fh, n).decode("utf-8"))
        tensors: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise CheckpointError("truncated checkpoint")
            (ln,) = struct.unpack("<I", head)
            name = _read_exact(fh, ln).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank)) if rank else ()
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").astype(DTYPE)
            tensors[name] = data.reshape(shape)
    return header, tensors


def save_checkpoint(path, tree: ParamTree, adapter=None) -> None:
    header = {
        "arch": tree.header,
        "trainable": {n: tree.is_trainable(n) for n in tree.names()},
        "row_masks": {n: tree.row_mask(n).astype(int).tolist() for n in tree.names()
                      if tree.row_mask(n) is not None},
    }
    tensors = {n: tree.get(n) for n in tree.names()}
    if adapter is not None:
        header["lora"] = adapter.meta()
        tensors.update(adapter.tensors())
    write_container(path, header, tensors)


def load_checkpoint(path):
    """Returns ``(tree, adapter)``; adapter is None when none was saved."""
    header, tensors = read_container(path)
    tree = ParamTree(header.get("arch", {}))
    trainable = header.get("trainable", {})
    for name, value in tensors.items():
        if name.startswith("lora."):
            continue
        tree.add(name, value, trainable=bool(trainable.get(name, True)))
    for name, rows in header.get("row_masks", {}).items():
        tree.set_row_mask(name, np.asarray(rows, dtype=bool))
    adapter = None
    if "lora" in header:
        from bitro.train.lora import LoraAdapter

        adapter = LoraAdapter.from_tensors(header["lora"], tensors)
    return tree, adapter
