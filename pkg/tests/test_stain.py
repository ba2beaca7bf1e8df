import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from bitro.stain import (
    StainBasis,
    StainError,
    fit_stain_basis,
    normalize_to_reference,
    od_to_rgb,
    read_png,
    reference_basis,
    rgb_to_od,
    solve_density,
    write_png,
)
from bitro.synth import stain_tile


def column_angles(w_true, w_est):
    """Per-column angles in degrees after Hungarian column matching."""
    cos = np.clip((w_true / np.linalg.norm(w_true, axis=0)).T @ (w_est / np.linalg.norm(w_est, axis=0)), -1, 1)
    rows, cols = linear_sum_assignment(-cos)
    return np.degrees(np.arccos(cos[rows, cols]))


def test_od_examples():
    assert rgb_to_od(np.array([255.0])).od[0] == 0.0
    assert abs(rgb_to_od(np.array([255.0 / np.e])).od[0] - 1.0) < 1e-12


def test_od_round_trip_within_one_lsb(rng):
    px = rng.integers(1, 256, size=(16, 16, 3))
    back = od_to_rgb(rgb_to_od(px)).astype(int)
    assert np.max(np.abs(back - px)) <= 1


def test_planted_exact_factorization_without_penalty():
    pixels, basis, dens = stain_tile(0, size=64)
    od = (basis @ dens.reshape(2, -1)).T.reshape(64, 64, 3)
    from bitro.stain import OdImage

    fit = fit_stain_basis(OdImage(od), lambda_sparse=0.0)
    assert fit.rel_error[-1] < 1e-3


def test_rank_one_image_has_empty_second_stain(rng):
    from bitro.stain import OdImage

    w = np.array([0.65, 0.70, 0.29])
    w = w / np.linalg.norm(w)
    od = OdImage((rng.uniform(0.3, 1.5, size=(32 * 32, 1)) * w).reshape(32, 32, 3))
    fit = fit_stain_basis(od)
    frac = fit.density.sum(axis=1) / fit.density.sum()
    assert frac.min() < 1e-3


@pytest.mark.parametrize("seed", range(5))
def test_planted_basis_recovered_within_five_degrees(seed):
    pixels, basis, _ = stain_tile(seed)
    fit = fit_stain_basis(rgb_to_od(pixels))
    assert column_angles(basis, fit.basis.w).max() < 5.0


@pytest.mark.parametrize("seed", range(3))
def test_objective_monotone(seed):
    pixels, _, _ = stain_tile(seed + 10)
    for step in ("exact", "mu"):
        obj = fit_stain_basis(rgb_to_od(pixels), h_step=step, iters=60).objective
        assert all(b <= a * (1 + 1e-12) for a, b in zip(obj, obj[1:]))


def test_canonical_column_order():
    pixels, _, _ = stain_tile(3)
    w = fit_stain_basis(rgb_to_od(pixels)).basis.w
    assert w[2, 0] >= w[2, 1]


def test_all_background_is_an_error():
    with pytest.raises(StainError):
        fit_stain_basis(rgb_to_od(np.full((8, 8, 3), 255)))


def test_self_reference_round_trip():
    pixels, _, _ = stain_tile(4)
    out = normalize_to_reference(pixels, reference_basis(pixels))
    assert np.mean(np.abs(out.astype(int) - pixels.astype(int))) < 5


def test_pure_white_unchanged():
    pixels, _, _ = stain_tile(5)
    white = np.full((16, 16, 3), 255, dtype=np.uint8)
    np.testing.assert_array_equal(normalize_to_reference(white, reference_basis(pixels)), white)


def test_planted_renormalization():
    # source painted with one basis, reference given as another basis with the
    # source's own density percentiles: output should be W_ref H_src
    size = 96
    src, w_src, dens = stain_tile(6, size=size)
    w_ref = np.array([[0.55, 0.15], [0.78, 0.95], [0.30, 0.27]])
    w_ref = w_ref / np.linalg.norm(w_ref, axis=0)
    from bitro.stain import tissue_mask

    tissue = tissue_mask(rgb_to_od(src))
    target = np.percentile(dens.reshape(2, -1)[:, tissue], 99, axis=1)
    out = normalize_to_reference(src, StainBasis(w_ref, target))
    want = (w_ref @ dens.reshape(2, -1)).T.reshape(size, size, 3)
    err = np.abs(rgb_to_od(out).od - want)
    assert np.mean(err) < 0.05


def test_output_is_valid_bytes(rng):
    src, _, _ = stain_tile(7)
    out = normalize_to_reference(src, StainBasis(np.eye(3)[:, :2], [5.0, 5.0]))
    assert out.dtype == np.uint8 and out.shape == src.shape


def test_solve_density_matches_nnls(rng):
    from scipy.optimize import nnls

    w = np.abs(rng.normal(size=(3, 2)))
    v = np.abs(rng.normal(size=(3, 50)))
    h = solve_density(v, w)
    for i in range(50):
        ref, _ = nnls(w, v[:, i])
        np.testing.assert_allclose(h[:, i], ref, atol=1e-10)


def test_basis_validation_and_file_round_trip(tmp_path):
    with pytest.raises(StainError):
        StainBasis(np.ones((3, 2)))
    with pytest.raises(StainError):
        StainBasis(-np.eye(3)[:, :2])
    b = StainBasis(np.eye(3)[:, :2], [1.25, 0.5])
    b.write(tmp_path / "basis.tsv")
    back = StainBasis.read(tmp_path / "basis.tsv")
    np.testing.assert_array_equal(back.w, b.w)
    np.testing.assert_array_equal(back.max_density, b.max_density)


def test_png_round_trip(tmp_path):
    px, _, _ = stain_tile(8, size=32)
    write_png(tmp_path / "t.png", px)
    np.testing.assert_array_equal(read_png(tmp_path / "t.png"), px)
