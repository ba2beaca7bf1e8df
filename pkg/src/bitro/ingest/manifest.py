"""Dataset manifests: which samples exist and where their files live."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from bitro.ingest.tables import (
    CellTable,
    ExpressionFrame,
    ParseError,
    read_cells,
    read_expression,
    read_gene_list,
)

UNITS = {"counts": "raw_counts", "tpm": "raw_counts", "log1p": "log1p"}


@dataclass(frozen=True)
class SampleEntry:
    id: str
    cells: Path
    expr: Path


@dataclass(frozen=True)
class DatasetDescriptor:
    task: str  # "bulk" | "spot"
    patch_px: float
    samples: tuple[SampleEntry, ...]
    genes: Path | None = None
    units: str = "counts"
    path: Path | None = None

    @property
    def sample_ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def sample(self, sample_id: str) -> SampleEntry:
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise KeyError(sample_id)

    def gene_list(self) -> list[str] | None:
        return None if self.genes is None else read_gene_list(self.genes)

    def load(self, entry: SampleEntry) -> tuple[CellTable, ExpressionFrame]:
        cells = read_cells(entry.cells, entry.id)
        expr = read_expression(entry.expr, UNITS[self.units])
        genes = self.gene_list()
        if genes is not None:
            expr = expr.select_genes(genes)
        return cells, expr


def _require(obj: dict, key: str, kind, where: str):
    if key not in obj:
        raise ParseError(f"{where}: missing field {key!r}")
    val = obj[key]
    if not isinstance(val, kind) or isinstance(val, bool):
        raise ParseError(f"{where}: field {key!r} has wrong type {type(val).__name__}")
    return val


def _resolve(root: Path, rel: str, field: str) -> Path:
    p = Path(rel)
    p = p if p.is_absolute() else root / p
    if not p.exists():
        raise ParseError(f"field {field!r}: missing file {p}")
    return p


def load_manifest(path) -> DatasetDescriptor:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"missing file: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ParseError(f"{path}: manifest must be a JSON object")
    where = str(path)
    task = _require(raw, "task", str, where)
    if task not in ("bulk", "spot"):
        raise ParseError(f"{where}: field 'task' must be 'bulk' or 'spot', got {task!r}")
    patch_px = _require(raw, "patch_px", (int, float), where)
    if patch_px <= 0:
        raise ParseError(f"{where}: field 'patch_px' must be positive")
    units = raw.get("units", "counts")
    if units not in UNITS:
        raise ParseError(f"{where}: field 'units' must be one of {sorted(UNITS)}")
    root = path.parent
    genes = raw.get("genes")
    genes_path = None if genes is None else _resolve(root, genes, "genes")
    samples_raw = _require(raw, "samples", list, where)
    if not samples_raw:
        raise ParseError(f"{where}: field 'samples' is empty")
    samples = []
    seen = set()
    for i, s in enumerate(samples_raw):
        sw = f"{where}: samples[{i}]"
        if not isinstance(s, dict):
            raise ParseError(f"{sw} must be an object")
        sid = _require(s, "id", str, sw)
        if sid in seen:
            raise ParseError(f"{sw}: duplicate sample id {sid!r}")
        seen.add(sid)
        samples.append(SampleEntry(sid, _resolve(root, _require(s, "cells", str, sw), "cells"),
                                   _resolve(root, _require(s, "expr", str, sw), "expr")))
    return DatasetDescriptor(task, float(patch_px), tuple(samples), genes_path, units, path)


def write_manifest(path, task: str, patch_px: float, samples: list[dict],
                   genes: str | None = None, units: str = "counts") -> None:
    body = {"task": task, "genes": genes, "patch_px": patch_px, "units": units, "samples": samples}
    Path(path).write_text(json.dumps(body, indent=2) + "\n", encoding="utf-8")
