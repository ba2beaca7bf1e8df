import logging

import numpy as np
import pytest

from bitro.ingest.bags import VISIUM_PATCH_PX, assign_cells_to_spots, grid_bulk_bags
from bitro.ingest.features import stub_features
from bitro.ingest.genes import (
    NormStats,
    denormalize,
    dispersion_z,
    final_gene_set,
    normalize_expression,
    select_hvgs,
)
from bitro.ingest.manifest import load_manifest, write_manifest
from bitro.ingest.pca import DEFAULT_DIM, DEFAULT_INPUT_WIDTH, apply_pca, fit_pca, reconstruct
from bitro.ingest.tables import (
    CellTable,
    DatasetError,
    ExpressionFrame,
    ParseError,
    read_cells,
    read_expression,
    write_cells,
    write_expression,
)
from bitro.numerics import ContractError


def _cells(coords, sid="s"):
    coords = np.asarray(coords, dtype=float)
    return CellTable(sid, np.arange(len(coords)), coords, np.zeros((len(coords), 2)))


def _spots(centers):
    centers = np.asarray(centers, dtype=float)
    return ExpressionFrame([f"u{i}" for i in range(len(centers))], np.ones((len(centers), 1)), ["A"], centers)


def _write_sample(root, sid, n_cells=5, spot=True):
    cells = _cells(np.full((n_cells, 2), 10.0), sid)
    coords = np.array([[10.0, 10.0]]) if spot else None
    write_cells(root / f"{sid}_cells.tsv", cells)
    write_expression(root / f"{sid}_expr.tsv", ExpressionFrame([f"{sid}_u"], [[1.0, 2.0]], ["A", "B"], coords))
    return {"id": sid, "cells": f"{sid}_cells.tsv", "expr": f"{sid}_expr.tsv"}


# -- manifest and tables ----------------------------------------------------


def test_minimal_spot_manifest(tmp_path):
    write_manifest(tmp_path / "m.json", "spot", 224, [_write_sample(tmp_path, "a")])
    desc = load_manifest(tmp_path / "m.json")
    assert desc.task == "spot" and desc.sample_ids == ["a"]
    cells, expr = desc.load(desc.samples[0])
    assert cells.n == 5 and expr.gene_names == ["A", "B"]


def test_bulk_manifest_round_trip(tmp_path):
    entries = [_write_sample(tmp_path, f"b{i}", spot=False) for i in range(4)]
    write_manifest(tmp_path / "m.json", "bulk", 224, entries)
    desc = load_manifest(tmp_path / "m.json")
    assert desc.task == "bulk" and len(desc.samples) == 4
    assert desc.load(desc.samples[2])[1].unit_coords is None


def test_missing_file_is_named(tmp_path):
    entry = _write_sample(tmp_path, "a")
    entry["expr"] = "nowhere.tsv"
    write_manifest(tmp_path / "m.json", "spot", 224, [entry])
    with pytest.raises(ParseError, match="nowhere.tsv"):
        load_manifest(tmp_path / "m.json")


@pytest.mark.parametrize("body", [
    '{"task": "spot", "patch_px": 224}',
    '{"task": "tile", "patch_px": 224, "samples": []}',
    '{"task": "spot", "patch_px": "big", "samples": []}',
    '[1, 2]',
    '{not json',
])
def test_schema_violations(tmp_path, body):
    (tmp_path / "m.json").write_text(body)
    with pytest.raises(ParseError):
        load_manifest(tmp_path / "m.json")


def test_duplicate_sample_ids(tmp_path):
    entry = _write_sample(tmp_path, "a")
    write_manifest(tmp_path / "m.json", "spot", 224, [entry, entry])
    with pytest.raises(ParseError, match="duplicate"):
        load_manifest(tmp_path / "m.json")


def test_table_round_trip(tmp_path, rng):
    cells = CellTable("s", np.arange(6), rng.uniform(0, 100, (6, 2)), rng.normal(size=(6, 3)))
    write_cells(tmp_path / "c.tsv", cells)
    back = read_cells(tmp_path / "c.tsv", "s")
    np.testing.assert_array_equal(back.features, cells.features)
    np.testing.assert_array_equal(back.coords, cells.coords)
    expr = ExpressionFrame(["x", "y"], rng.uniform(0, 5, (2, 3)), ["G1", "G2", "G3"], rng.uniform(0, 9, (2, 2)))
    write_expression(tmp_path / "e.tsv", expr)
    np.testing.assert_array_equal(read_expression(tmp_path / "e.tsv").values, expr.values)


@pytest.mark.parametrize("make", [
    lambda: CellTable("s", [0, 0], np.zeros((2, 2)), np.zeros((2, 1))),
    lambda: CellTable("s", [0], [[-1.0, 0.0]], np.zeros((1, 1))),
    lambda: ExpressionFrame(["u"], [[-1.0]], ["A"]),
    lambda: ExpressionFrame(["u"], [[1.0, 2.0]], ["A", "A"]),
])
def test_table_validation(make):
    with pytest.raises(DatasetError):
        make()


# -- bags -------------------------------------------------------------------


def test_cell_at_center_is_assigned():
    bags = assign_cells_to_spots(_cells([[10, 10]]), _spots([[10, 10]]), 224)
    assert bags[0].member_cell_indices.tolist() == [0]


def test_cell_outside_patch_is_not_assigned(caplog):
    bags = assign_cells_to_spots(_cells([[200, 10], [10, 10]]), _spots([[10, 10]]), 224)
    assert bags[0].member_cell_indices.tolist() == [1]


def test_empty_spots_dropped_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        bags = assign_cells_to_spots(_cells([[10, 10]]), _spots([[10, 10], [900, 900]]), 224)
    assert len(bags) == 1 and "dropped 1" in caplog.text


def test_no_spot_gets_cells():
    with pytest.raises(DatasetError):
        assign_cells_to_spots(_cells([[900, 900]]), _spots([[10, 10]]), 224)


def test_membership_ignores_cell_order(rng):
    coords = rng.uniform(0, 500, size=(200, 2))
    spots = _spots(rng.uniform(0, 500, size=(6, 2)))
    perm = rng.permutation(200)
    a = assign_cells_to_spots(_cells(coords), spots, 100)
    b = assign_cells_to_spots(_cells(coords[perm]), spots, 100)
    assert [set(x.member_cell_indices) for x in a] == [set(perm[y.member_cell_indices]) for y in b]


def test_patch_constant():
    assert VISIUM_PATCH_PX == 224


def test_bulk_bag_sizes(rng):
    assert grid_bulk_bags(_cells(rng.uniform(0, 500, (100, 2))), max_cells=1000).n == 100
    big = _cells(rng.uniform(0, 5000, (5000, 2)))
    a = grid_bulk_bags(big, max_cells=2000, seed=3)
    b = grid_bulk_bags(big, max_cells=2000, seed=3)
    assert a.n == 2000
    np.testing.assert_array_equal(a.member_cell_indices, b.member_cell_indices)
    with pytest.raises(DatasetError):
        grid_bulk_bags(CellTable("s", [], np.zeros((0, 2)), np.zeros((0, 2))))


# -- PCA --------------------------------------------------------------------


def test_pca_line_is_one_component(rng):
    t = rng.normal(size=(100, 1))
    x = t @ np.array([[1.0, 2.0, -1.0]]) + 3.0
    assert np.isclose(fit_pca(x, 1).explained_variance_ratio[0], 1.0)


def test_pca_isotropic_half_variance(rng):
    x = rng.normal(size=(20000, 4))
    assert abs(fit_pca(x, 2).explained_variance_ratio.sum() - 0.5) < 0.02


def test_pca_matches_covariance_eigenvalues(rng):
    x = rng.normal(size=(300, 5)) @ rng.normal(size=(5, 5))
    model = fit_pca(x, 3)
    eig = np.sort(np.linalg.eigvalsh(np.cov(x.T)))[::-1]
    np.testing.assert_allclose(model.explained_variance, eig[:3], rtol=1e-9)
    np.testing.assert_allclose(model.components @ model.components.T, np.eye(3), atol=1e-12)


def test_pca_reconstruction_error_non_increasing(rng):
    x = rng.normal(size=(50, 6)) @ rng.normal(size=(6, 6))
    errs = []
    for d in range(1, 6):
        m = fit_pca(x, d)
        errs.append(np.sum((reconstruct(m, apply_pca(m, x)) - x) ** 2))
    assert all(b <= a + 1e-9 for a, b in zip(errs, errs[1:]))


def test_pca_bad_dimension(rng):
    with pytest.raises(ContractError):
        fit_pca(rng.normal(size=(10, 4)), 4)
    with pytest.raises(ContractError):
        fit_pca(rng.normal(size=(3, 8)), 3)


def test_default_widths():
    assert (DEFAULT_INPUT_WIDTH, DEFAULT_DIM) == (1024, 128)


# -- genes ------------------------------------------------------------------


def _brute_z(values, n_bins):
    mean = values.mean(axis=0)
    disp = values.var(axis=0) / mean
    order = sorted(range(len(mean)), key=lambda g: (mean[g], g))
    z = np.zeros(len(mean))
    for b in range(n_bins):
        members = [g for rank, g in enumerate(order) if rank * n_bins // len(mean) == b]
        d = disp[members]
        if d.std() > 0:
            z[members] = (d - d.mean()) / d.std()
    return z


def test_identical_dispersions_give_zero_z():
    values = np.tile(np.array([[1.0], [3.0]]), (1, 6))
    z, flagged = dispersion_z(values, 2)
    assert np.all(z == 0.0) and flagged == [0, 1]


def test_outlier_dispersion_tops_its_bin(rng):
    values = 2.0 + 0.1 * rng.normal(size=(50, 10))
    values[:, 4] = 2.0 + 1.0 * rng.normal(size=50)
    z, _ = dispersion_z(values, 1)
    assert np.argmax(z) == 4
    np.testing.assert_allclose(z, _brute_z(values, 1), atol=1e-12)


def test_dispersion_matches_brute_force(rng):
    values = np.log1p(rng.poisson(rng.uniform(1, 50, size=30), size=(40, 30)).astype(float))
    np.testing.assert_allclose(dispersion_z(values, 5)[0], _brute_z(values, 5), atol=1e-12)


def test_mito_genes_excluded(rng):
    frame = ExpressionFrame([f"u{i}" for i in range(10)], rng.uniform(0.5, 3, (10, 3)),
                            ["MT-CO1", "RPS4", "KRT5"], space_tag="log1p")
    assert select_hvgs({"s": frame}, n_bins=1, top_k=5).candidates == ["KRT5"]


def test_hvg_needs_log1p(rng):
    with pytest.raises(ContractError):
        select_hvgs({"s": ExpressionFrame(["u"], [[1.0]], ["A"])})


def test_hvg_order_within_bin_survives_scaling(rng):
    disp = np.linspace(0.2, 2.0, 8)
    counts = np.exp(rng.normal(3, 1, size=(200, 8)) * np.sqrt(disp)) + 1
    z1, _ = dispersion_z(np.log1p(counts), 1)
    z2, _ = dispersion_z(np.log1p(3.0 * counts), 1)
    assert np.argsort(z1).tolist() == np.argsort(z2).tolist()


def _frame(values, genes):
    return ExpressionFrame([f"u{i}" for i in range(len(values))], values, genes, space_tag="log1p")


def test_final_set_with_k_all_genes(rng):
    frame = _frame(rng.uniform(0, 5, (10, 4)), ["A", "B", "C", "D"])
    assert final_gene_set(["A", "C"], [frame], k=4) == ["A", "C"]


def test_final_set_empty_intersection():
    frame = _frame(np.array([[10.0, 0.0], [10.1, 5.0]]), ["HI_MEAN", "HI_SD"])
    with pytest.raises(DatasetError, match="larger K"):
        final_gene_set(["HI_MEAN", "HI_SD"], [frame], k=1)


def test_final_set_cap(rng):
    genes = [f"G{i}" for i in range(6)]
    frame = _frame(rng.uniform(0, 5, (10, 6)), genes)
    scores = {g: float(i) for i, g in enumerate(genes)}
    import pandas as pd
    assert final_gene_set(genes, [frame], k=6, cap=2, hvg_scores=pd.Series(scores)) == ["G4", "G5"]


def test_normalize_examples():
    raw = ExpressionFrame(["a", "b"], [[0.0, 3.0], [0.0, 5.0]], ["A", "B"])
    z, stats = normalize_expression(raw)
    assert stats.mu[0] == 0.0
    np.testing.assert_array_equal(z.values[:, 0], [0.0, 0.0])
    assert z.space_tag == "zscore"
    with pytest.raises(ContractError):
        normalize_expression(z)


def test_normalize_round_trip(rng):
    frame = _frame(rng.uniform(0, 8, (30, 5)), list("ABCDE"))
    z, stats = normalize_expression(frame)
    np.testing.assert_allclose(denormalize(z, stats).values, frame.values, atol=1e-10)


def test_norm_stats_file_round_trip(tmp_path, rng):
    stats = NormStats(["A", "B"], rng.normal(size=2), rng.uniform(size=2))
    stats.write(tmp_path / "n.tsv")
    back = NormStats.read(tmp_path / "n.tsv")
    np.testing.assert_array_equal(back.mu, stats.mu)
    np.testing.assert_array_equal(back.sigma, stats.sigma)


def test_stub_features():
    a = stub_features("s", [1, 2, 3], seed=4)
    assert a.shape == (3, 1024)
    np.testing.assert_array_equal(a, stub_features("s", [1, 2, 3], seed=4))
    assert not np.array_equal(a[0], a[1])
    np.testing.assert_array_equal(stub_features("s", [3, 1], seed=4), a[[2, 0]])
