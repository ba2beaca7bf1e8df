"""Synthetic slides with planted cell types, features and expression.

Each cell has a hidden type. Its feature vector is the type mean plus
Gaussian noise and its expression is the type profile, so every spot or bulk
target is an exact sum over member cells before noise is added.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from bitro.ingest.bags import VISIUM_PATCH_PX
from bitro.ingest.manifest import write_manifest
from bitro.ingest.tables import FLOAT_FMT, CellTable, ExpressionFrame, write_cells, write_expression, write_gene_list
from bitro.pipeline import Sample


@dataclass
class PlantedWorld:
    seed: int = 0
    d: int = 16
    g: int = 32
    k_types: int = 4
    noise: float = 0.1  # expression noise, std = noise * sqrt(mean)
    feature_noise: float = 0.3
    patch_px: float = VISIUM_PATCH_PX
    spot_spacing: float = 1.5  # in patch widths
    field_scale: float = 1.5  # spatial type-field amplitude
    sample_shift: float = 0.5  # per-sample type-logit offset SD
    type_means: np.ndarray = field(default=None, repr=False)  # K x D
    profiles: np.ndarray = field(default=None, repr=False)  # K x G, non-negative
    offsets: np.ndarray = field(default=None, repr=False)  # K x 2, within-spot type positions

    def __post_init__(self):
        rng = np.random.default_rng([self.seed, 0])
        if self.type_means is None:
            self.type_means = rng.normal(0.0, 1.0, size=(self.k_types, self.d))
        if self.profiles is None:
            base = np.exp(rng.uniform(np.log(2.0), np.log(20.0), size=self.g))
            mix = rng.uniform(0.1, 0.6, size=(self.k_types, self.g))
            mix[np.arange(self.g) % self.k_types, np.arange(self.g)] += 3.0
            self.profiles = base * mix
        if self.offsets is None:
            ang = 2 * np.pi * np.arange(self.k_types) / self.k_types
            self.offsets = 0.25 * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        self.type_means = np.asarray(self.type_means, dtype=float)
        self.profiles = np.asarray(self.profiles, dtype=float)
        if np.any(self.profiles < 0):
            raise ValueError("expression profiles must be non-negative")

    @property
    def genes(self) -> list[str]:
        return [f"G{i:03d}" for i in range(self.profiles.shape[1])]


@dataclass
class SynthSample:
    sample: Sample
    types: np.ndarray  # per cell
    unit_of_cell: np.ndarray  # spot index per cell
    truth: np.ndarray  # cells x G, noiseless
    spot_truth: np.ndarray  # spots x G, noiseless


def _type_field(world: PlantedWorld, rng, pos: np.ndarray, extent: float) -> np.ndarray:
    """Smooth random logits (spots x K) from a few low-frequency waves."""
    n_waves = 3
    freq = rng.normal(0.0, 2 * np.pi / extent, size=(world.k_types, n_waves, 2))
    phase = rng.uniform(0, 2 * np.pi, size=(world.k_types, n_waves))
    waves = np.cos(np.einsum("kwc,sc->skw", freq, pos) + phase)
    return world.field_scale * waves.sum(axis=2)


def simulate_sample(world: PlantedWorld, index: int, n_spots: int = 64, cells_per_spot: int = 24,
                    task: str = "spot", prefix: str = "s") -> SynthSample:
    if n_spots < 1 or cells_per_spot < 1:
        raise ValueError("spot and cell counts must be >= 1")
    rng = np.random.default_rng([world.seed, 1, index])
    side = int(np.ceil(np.sqrt(n_spots)))
    step = world.spot_spacing * world.patch_px
    grid = np.stack(np.meshgrid(np.arange(side), np.arange(side), indexing="ij"), -1).reshape(-1, 2)[:n_spots]
    centers = world.patch_px + grid * step
    logits = _type_field(world, rng, centers, side * step)
    logits = logits + rng.normal(0.0, world.sample_shift, size=world.k_types)
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)

    n = n_spots * cells_per_spot
    unit = np.repeat(np.arange(n_spots), cells_per_spot)
    u = rng.random(n)
    types = np.minimum((u[:, None] > np.cumsum(probs[unit], axis=1)).sum(axis=1), world.k_types - 1)
    jitter = rng.normal(0.0, 0.08, size=(n, 2))
    local = np.clip(world.offsets[types] + jitter, -0.45, 0.45)
    coords = centers[unit] + local * world.patch_px
    feats = world.type_means[types] + rng.normal(0.0, world.feature_noise, size=(n, world.d))

    truth = world.profiles[types]
    spot_truth = np.zeros((n_spots, world.g))
    np.add.at(spot_truth, unit, truth)
    sid = f"{prefix}{index}"
    cells = CellTable(sid, np.arange(n), coords, feats)
    if task == "spot":
        values, ids, ucoords = spot_truth, [f"{sid}_spot{m:03d}" for m in range(n_spots)], centers
    else:
        values, ids, ucoords = spot_truth.sum(axis=0, keepdims=True), [sid], None
    if world.noise > 0:
        values = values + world.noise * np.sqrt(values) * rng.standard_normal(values.shape)
        values = np.maximum(values, 0.0)
    expr = ExpressionFrame(ids, values, world.genes, ucoords, "raw_counts")
    return SynthSample(Sample(sid, cells, expr, task), types, unit, truth, spot_truth)


def simulate(world: PlantedWorld, n_samples: int = 6, n_spots: int = 64, cells_per_spot: int = 24,
             task: str = "spot", prefix: str = "s", start: int = 0) -> list[SynthSample]:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    return [simulate_sample(world, start + i, n_spots, cells_per_spot, task, prefix)
            for i in range(n_samples)]


def write_dataset(out_dir, world: PlantedWorld, samples: list[SynthSample]) -> Path:
    """Write manifest.json, genes.txt and per-sample tables; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_gene_list(out / "genes.txt", world.genes)
    entries = []
    for s in samples:
        sid = s.sample.id
        (out / sid).mkdir(exist_ok=True)
        write_cells(out / sid / "cells.tsv", s.sample.cells)
        write_expression(out / sid / "expr.tsv", s.sample.expr)
        unit_ids = s.sample.expr.unit_ids
        cols = {"cell_id": s.sample.cells.cell_ids,
                "unit_id": [unit_ids[u] if len(unit_ids) > 1 else unit_ids[0] for u in s.unit_of_cell],
                "type": s.types}
        truth = pd.concat([pd.DataFrame(cols), pd.DataFrame(s.truth, columns=[f"g_{g}" for g in world.genes])],
                          axis=1)
        truth.to_csv(out / sid / "truth_cells.tsv", sep="\t", index=False, float_format=FLOAT_FMT)
        entries.append({"id": sid, "cells": f"{sid}/cells.tsv", "expr": f"{sid}/expr.tsv"})
    write_manifest(out / "manifest.json", samples[0].sample.task, world.patch_px, entries, "genes.txt")
    return out / "manifest.json"


def generate(out_dir, world: PlantedWorld, n_samples: int = 6, n_spots: int = 64,
             cells_per_spot: int = 24, task: str = "spot") -> Path:
    return write_dataset(out_dir, world, simulate(world, n_samples, n_spots, cells_per_spot, task))


def paired_tasks(world: PlantedWorld, n_st: int = 6, n_bulk: int = 6, n_spots: int = 64,
                 cells_per_spot: int = 24, bulk_spots: int | None = None
                 ) -> tuple[list[SynthSample], list[SynthSample]]:
    """Spot and bulk cohorts from the same profiles with disjoint sample ids.

    Bulk slides use ``bulk_spots`` cell clusters each (default ``n_spots``).
    """
    st = simulate(world, n_st, n_spots, cells_per_spot, "spot", prefix="st")
    bulk = simulate(world, n_bulk, bulk_spots or n_spots, cells_per_spot, "bulk", prefix="bk", start=n_st)
    return st, bulk


def stain_tile(seed: int, size: int = 128, basis: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Tissue-like RGB tile painted from a planted two-stain basis.

    Returns ``(pixels, basis, density)``: nuclei are Gaussian blobs of the
    first stain displacing a wavy second-stain stroma, with a blank margin.
    """
    from bitro.stain import RUIFROK_HE, od_to_rgb

    rng = np.random.default_rng([seed, 7])
    if basis is None:
        basis = np.abs(RUIFROK_HE + rng.normal(0.0, 0.08, size=(3, 2)))
    basis = np.asarray(basis, dtype=float) / np.linalg.norm(basis, axis=0)
    yy, xx = np.mgrid[:size, :size].astype(float)
    dens = np.zeros((2, size, size))
    for _ in range(max(1, size * size // 650)):
        cx, cy = rng.uniform(0, size, 2)
        r = rng.uniform(3, 7)
        dens[0] += rng.uniform(0.8, 1.6) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r * r))
    wave = np.sin(xx / rng.uniform(8, 20) + rng.uniform(0, 6)) * np.cos(yy / rng.uniform(8, 20))
    dens[1] = np.clip(0.5 + 0.5 * wave, 0, None) * rng.uniform(0.6, 1.2) * np.clip(1 - dens[0], 0, 1)
    dens[:, :, : size // 8] = 0.0
    od = (basis @ dens.reshape(2, -1)).T.reshape(size, size, 3)
    return od_to_rgb(od), basis, dens
