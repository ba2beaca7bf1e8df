"""Grouping cells into bags: one per spot, or one per bulk slide."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from bitro.ingest.tables import CellTable, DatasetError, ExpressionFrame

log = logging.getLogger(__name__)

VISIUM_PATCH_PX = 224  # 55 um Visium spot at the working magnification
DEFAULT_MAX_CELLS = 4096


@dataclass
class Bag:
    unit_id: str
    member_cell_indices: np.ndarray
    target: np.ndarray | None = None
    patch_ids: np.ndarray | None = None  # per member; graphs stay within a patch
    unit_coord: np.ndarray | None = None

    def __post_init__(self):
        self.member_cell_indices = np.asarray(self.member_cell_indices, dtype=np.intp)
        if len(self.member_cell_indices) == 0:
            raise DatasetError(f"bag {self.unit_id!r} has no cells")

    @property
    def n(self) -> int:
        return len(self.member_cell_indices)


def assign_cells_to_spots(cells: CellTable, spots: ExpressionFrame,
                          patch_px: float = VISIUM_PATCH_PX) -> list[Bag]:
    """A cell joins every spot whose patch square (side ``patch_px``) contains it."""
    if spots.unit_coords is None:
        raise DatasetError("spot assignment needs unit coordinates")
    if patch_px <= 0:
        raise DatasetError("patch_px must be positive")
    half = patch_px / 2.0
    bags, empty = [], 0
    for m, center in enumerate(spots.unit_coords):
        inside = (np.abs(cells.coords[:, 0] - center[0]) <= half) & \
                 (np.abs(cells.coords[:, 1] - center[1]) <= half)
        idx = np.flatnonzero(inside)
        if len(idx) == 0:
            empty += 1
            continue
        bags.append(Bag(spots.unit_ids[m], idx, spots.values[m].copy(), unit_coord=center.copy()))
    if not bags:
        raise DatasetError(f"{cells.sample_id}: no spot received any cell")
    if empty:
        log.warning("%s: dropped %d empty spot(s)", cells.sample_id, empty)
    return bags


def grid_patch_ids(coords: np.ndarray, patch_px: float) -> np.ndarray:
    ij = np.floor(np.asarray(coords) / patch_px).astype(np.int64)
    _, ids = np.unique(ij, axis=0, return_inverse=True)
    return ids.reshape(-1)


def grid_bulk_bags(cells: CellTable, patch_px: float = VISIUM_PATCH_PX,
                   max_cells: int = DEFAULT_MAX_CELLS, seed: int = 0,
                   target: np.ndarray | None = None, unit_id: str | None = None) -> Bag:
    """All cells of a slide in one bag, uniformly subsampled to ``max_cells``."""
    if max_cells <= 0:
        raise DatasetError("max_cells must be positive")
    if cells.n == 0:
        raise DatasetError(f"{cells.sample_id}: slide has no cells")
    idx = np.arange(cells.n)
    if cells.n > max_cells:
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(cells.n, size=max_cells, replace=False))
    patches = grid_patch_ids(cells.coords[idx], patch_px)
    return Bag(unit_id or cells.sample_id, idx, target, patch_ids=patches)
