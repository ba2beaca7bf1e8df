"""Dataset ingestion: manifests, tables, bags, PCA and gene preprocessing."""

from bitro.ingest.bags import Bag, assign_cells_to_spots, grid_bulk_bags
from bitro.ingest.features import stub_features
from bitro.ingest.genes import (
    NormStats,
    denormalize,
    final_gene_set,
    normalize_expression,
    select_hvgs,
    to_log1p,
)
from bitro.ingest.manifest import DatasetDescriptor, SampleEntry, load_manifest, write_manifest
from bitro.ingest.pca import PcaModel, apply_pca, fit_pca
from bitro.ingest.tables import CellTable, DatasetError, ExpressionFrame, ParseError

__all__ = [
    "Bag", "CellTable", "DatasetDescriptor", "DatasetError", "ExpressionFrame", "NormStats",
    "ParseError", "PcaModel", "SampleEntry", "apply_pca", "assign_cells_to_spots",
    "denormalize", "final_gene_set", "fit_pca", "grid_bulk_bags", "load_manifest",
    "normalize_expression", "select_hvgs", "stub_features", "to_log1p", "write_manifest",
]
