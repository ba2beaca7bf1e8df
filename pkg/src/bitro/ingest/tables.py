"""Cell and expression tables and their TSV formats."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

SPACES = ("raw_counts", "log1p", "zscore")
FLOAT_FMT = "%.17g"


class DatasetError(ValueError):
    pass


class ParseError(DatasetError):
    pass


@dataclass
class CellTable:
    sample_id: str
    cell_ids: np.ndarray  # (N,) int
    coords: np.ndarray  # (N, 2)
    features: np.ndarray  # (N, F)

    def __post_init__(self):
        self.cell_ids = np.asarray(self.cell_ids, dtype=np.int64)
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or len(self.features) != len(self.cell_ids):
            raise DatasetError(f"{self.sample_id}: features must be N x F with N = {len(self.cell_ids)}")
        if len(self.coords) != len(self.cell_ids):
            raise DatasetError(f"{self.sample_id}: coords and cell ids differ in length")
        if len(np.unique(self.cell_ids)) != len(self.cell_ids):
            raise DatasetError(f"{self.sample_id}: duplicate cell ids")
        if not np.all(np.isfinite(self.coords)) or np.any(self.coords < 0):
            raise DatasetError(f"{self.sample_id}: coordinates must be finite and non-negative")

    @property
    def n(self) -> int:
        return len(self.cell_ids)

    @property
    def width(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "CellTable":
        idx = np.asarray(idx)
        return CellTable(self.sample_id, self.cell_ids[idx], self.coords[idx], self.features[idx])

    def with_features(self, features: np.ndarray) -> "CellTable":
        return CellTable(self.sample_id, self.cell_ids, self.coords, features)


@dataclass
class ExpressionFrame:
    unit_ids: list[str]
    values: np.ndarray  # (M, G)
    gene_names: list[str]
    unit_coords: np.ndarray | None = None  # (M, 2); None for bulk
    space_tag: str = "raw_counts"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.unit_ids = [str(u) for u in self.unit_ids]
        self.gene_names = [str(g) for g in self.gene_names]
        self.values = np.asarray(self.values, dtype=np.float64).reshape(len(self.unit_ids), -1)
        if self.unit_coords is not None:
            self.unit_coords = np.asarray(self.unit_coords, dtype=np.float64).reshape(-1, 2)
        if self.space_tag not in SPACES:
            raise DatasetError(f"unknown space tag {self.space_tag!r}")
        if len(self.unit_ids) < 1:
            raise DatasetError("expression frame needs at least one unit")
        if len(set(self.gene_names)) != len(self.gene_names):
            raise DatasetError("duplicate gene names")
        if self.values.shape[1] != len(self.gene_names):
            raise DatasetError(f"{self.values.shape[1]} value columns for {len(self.gene_names)} genes")
        if self.space_tag == "raw_counts" and np.any(self.values < 0):
            raise DatasetError("raw counts must be non-negative")

    @property
    def n_units(self) -> int:
        return len(self.unit_ids)

    @property
    def n_genes(self) -> int:
        return len(self.gene_names)

    def select_genes(self, genes: list[str]) -> "ExpressionFrame":
        pos = {g: i for i, g in enumerate(self.gene_names)}
        missing = [g for g in genes if g not in pos]
        if missing:
            raise DatasetError(f"genes not present: {', '.join(missing[:5])}")
        cols = [pos[g] for g in genes]
        return replace(self, values=self.values[:, cols], gene_names=list(genes))

    def select_units(self, idx) -> "ExpressionFrame":
        idx = np.asarray(idx, dtype=np.intp)
        coords = None if self.unit_coords is None else self.unit_coords[idx]
        return replace(self, unit_ids=[self.unit_ids[i] for i in idx],
                       values=self.values[idx], unit_coords=coords)


def _read_tsv(path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"missing file: {path}")
    try:
        return pd.read_csv(path, sep="\t", dtype={"unit_id": str}, float_precision="round_trip")
    except Exception as exc:  # pandas raises several parser types
        raise ParseError(f"{path}: {exc}") from exc


def read_cells(path, sample_id: str) -> CellTable:
    df = _read_tsv(path)
    for col in ("cell_id", "x", "y"):
        if col not in df.columns:
            raise ParseError(f"{path}: missing column {col!r}")
    fcols = [c for c in df.columns if c.startswith("f")]
    expected = [f"f{i}" for i in range(len(fcols))]
    if fcols != expected:
        raise ParseError(f"{path}: feature columns must be f0..f{len(fcols) - 1} in order")
    return CellTable(sample_id, df["cell_id"].to_numpy(), df[["x", "y"]].to_numpy(float),
                     df[fcols].to_numpy(float))


def write_cells(path, cells: CellTable) -> None:
    df = pd.DataFrame({"cell_id": cells.cell_ids, "x": cells.coords[:, 0], "y": cells.coords[:, 1]})
    feats = pd.DataFrame(cells.features, columns=[f"f{i}" for i in range(cells.width)])
    pd.concat([df, feats], axis=1).to_csv(path, sep="\t", index=False, float_format=FLOAT_FMT)


def read_expression(path, space_tag: str = "raw_counts") -> ExpressionFrame:
    df = _read_tsv(path)
    for col in ("unit_id", "x", "y"):
        if col not in df.columns:
            raise ParseError(f"{path}: missing column {col!r}")
    gcols = [c for c in df.columns if c.startswith("g_")]
    if not gcols:
        raise ParseError(f"{path}: no g_<name> gene columns")
    xy = df[["x", "y"]].to_numpy(float)
    coords = None if np.all(np.isnan(xy)) else xy
    if coords is not None and np.any(np.isnan(coords)):
        raise ParseError(f"{path}: unit coordinates partially missing")
    return ExpressionFrame(df["unit_id"].tolist(), df[gcols].to_numpy(float),
                           [c[2:] for c in gcols], coords, space_tag)


def write_expression(path, frame: ExpressionFrame, id_col: str = "unit_id") -> None:
    if frame.unit_coords is None:
        xs = ys = [""] * frame.n_units
    else:
        xs, ys = frame.unit_coords[:, 0], frame.unit_coords[:, 1]
    df = pd.DataFrame({id_col: frame.unit_ids, "x": xs, "y": ys})
    vals = pd.DataFrame(frame.values, columns=[f"g_{g}" for g in frame.gene_names])
    pd.concat([df, vals], axis=1).to_csv(path, sep="\t", index=False, float_format=FLOAT_FMT)


def write_cell_expression(path, cell_ids, coords, values, gene_names) -> None:
    df = pd.DataFrame({"cell_id": np.asarray(cell_ids), "x": coords[:, 0], "y": coords[:, 1]})
    vals = pd.DataFrame(values, columns=[f"g_{g}" for g in gene_names])
    pd.concat([df, vals], axis=1).to_csv(path, sep="\t", index=False, float_format=FLOAT_FMT)


def read_gene_list(path) -> list[str]:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"missing file: {path}")
    genes = [line.strip() for line in path.read_text().splitlines()]
    return [g for g in genes if g and not g.startswith("#")]


def write_gene_list(path, genes: list[str]) -> None:
    Path(path).write_text("".join(f"{g}\n" for g in genes))


def write_phenotypes(path, rows: list[tuple[str, int, int]]) -> None:
    df = pd.DataFrame(rows, columns=["sample_id", "cell_id", "label"])
    df.to_csv(path, sep="\t", index=False)
