"""Stain normalization by sparse NMF of optical densities.

An RGB tile is mapped to optical density, factored as V = W H with a 3 x 2
non-negative stain basis W (hematoxylin, eosin) and a 2 x N density map H,
then re-painted with a reference basis after matching density percentiles.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

I0 = 255.0
LAMBDA_SPARSE = 0.1
N_ITER = 200
TISSUE_OD = 0.15
MIN_TISSUE_FRACTION = 0.01
PERCENTILE = 99.0
TINY = 1e-12
W_STEPS = 20
# Textbook H&E optical-density directions (R, G, B), used only as the starting point.
RUIFROK_HE = np.array([[0.650, 0.072], [0.704, 0.990], [0.286, 0.105]])


class StainError(ValueError):
    pass


@dataclass
class OdImage:
    od: np.ndarray  # H x W x 3, >= 0

    @property
    def height(self) -> int:
        return self.od.shape[0]

    @property
    def width(self) -> int:
        return self.od.shape[1]

    def flat(self) -> np.ndarray:
        """3 x N matrix of pixel densities."""
        return self.od.reshape(-1, 3).T


@dataclass
class StainBasis:
    w: np.ndarray  # 3 x 2, unit-norm columns, hematoxylin first
    max_density: np.ndarray | None = None  # per stain, at the matching percentile

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        if self.w.shape != (3, 2) or np.any(self.w < 0):
            raise StainError("stain basis must be a non-negative 3 x 2 matrix")
        if not np.allclose(np.linalg.norm(self.w, axis=0), 1.0, atol=1e-9):
            raise StainError("stain basis columns must have unit norm")
        if self.max_density is not None:
            self.max_density = np.asarray(self.max_density, dtype=float).reshape(2)

    def write(self, path) -> None:
        if self.max_density is None:
            raise StainError("a reference basis needs its max densities")
        rows = [["R", *self.w[0]], ["G", *self.w[1]], ["B", *self.w[2]], ["max_density", *self.max_density]]
        pd.DataFrame(rows, columns=["channel", "H", "E"]).to_csv(path, sep="\t", index=False,
                                                                   float_format="%.17g")

    @classmethod
    def read(cls, path) -> "StainBasis":
        path = Path(path)
        if not path.exists():
            raise StainError(f"missing file: {path}")
        df = pd.read_csv(path, sep="\t", float_precision="round_trip").set_index("channel")
        try:
            w = df.loc[["R", "G", "B"], ["H", "E"]].to_numpy(float)
            md = df.loc["max_density", ["H", "E"]].to_numpy(float)
        except KeyError as exc:
            raise StainError(f"{path}: expected rows R, G, B, max_density and columns H, E") from exc
        return cls(w, md)


def rgb_to_od(pixels, i0: float = I0) -> OdImage:
    if i0 <= 0:
        raise StainError("white reference i0 must be positive")
    px = np.asarray(pixels, dtype=float)
    return OdImage(np.maximum(-np.log(np.maximum(px, 1.0) / i0), 0.0))


def od_to_rgb(od, i0: float = I0) -> np.ndarray:
    od = od.od if isinstance(od, OdImage) else np.asarray(od, dtype=float)
    return np.clip(np.rint(i0 * np.exp(-od)), 0, 255).astype(np.uint8)


def snmf_objective(v: np.ndarray, w: np.ndarray, h: np.ndarray, lam: float) -> float:
    r = v - w @ h
    return 0.5 * float(np.sum(r * r)) + lam * float(np.sum(h))


def _initial_density(v: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.maximum(np.linalg.lstsq(w, v, rcond=None)[0], 1e-3)


def _update_h(v, w, h, lam):
    lam = np.reshape(lam, (-1, 1)) if np.ndim(lam) else lam
    return h * (w.T @ v) / (w.T @ w @ h + lam + TINY)


def _project_columns(w: np.ndarray) -> np.ndarray:
    w = np.maximum(w, 0.0)
    norms = np.linalg.norm(w, axis=0)
    return w / np.maximum(norms, 1.0)


def _update_w(v, w, h, steps: int = W_STEPS):
    """Projected gradient on W with non-negative columns of norm at most one.

    The norm cap removes the scale freedom that otherwise lets the L1 term
    shrink H by inflating W; a 1/L step never increases the objective.
    """
    hh, vh = h @ h.T, v @ h.T
    lip = float(np.linalg.eigvalsh(hh)[-1])
    if lip <= 0:
        return w
    for _ in range(steps):
        w = _project_columns(w - (w @ hh - vh) / lip)
    return w


def solve_density(v: np.ndarray, w: np.ndarray, lam=0.0) -> np.ndarray:
    """Exact per-pixel minimizer of 0.5 ||v - w h||^2 + lam . h over h >= 0.

    With two stains the active set has four possibilities; every feasible
    candidate is scored and the best kept.
    """
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (2,))
    g = w.T @ w
    b = w.T @ v - lam[:, None]
    n = v.shape[1]
    cands = [np.zeros((2, n))]
    for k in range(2):
        c = np.zeros((2, n))
        c[k] = np.maximum(b[k] / g[k, k], 0.0) if g[k, k] > 0 else 0.0
        cands.append(c)
    if abs(np.linalg.det(g)) > 1e-12:
        both = np.linalg.solve(g, b)
        cands.append(np.where(np.all(both >= 0, axis=0), both, 0.0))
    best, best_obj = None, None
    for c in cands:
        r = v - w @ c
        obj = 0.5 * np.sum(r * r, axis=0) + lam @ c
        if best is None:
            best, best_obj = c, obj
        else:
            take = obj < best_obj
            best = np.where(take, c, best)
            best_obj = np.where(take, obj, best_obj)
    return best


@dataclass
class StainFit:
    basis: StainBasis
    density: np.ndarray  # 2 x N over all pixels
    tissue: np.ndarray  # N booleans
    objective: list[float] = field(default_factory=list)
    rel_error: list[float] = field(default_factory=list)


def tissue_mask(od: OdImage, threshold: float = TISSUE_OD) -> np.ndarray:
    return od.flat().max(axis=0) > threshold


def fit_stain_basis(od: OdImage, lambda_sparse: float = LAMBDA_SPARSE, iters: int = N_ITER,
                    threshold: float = TISSUE_OD, init: np.ndarray | None = None,
                    density_lambda: float = 0.0, h_step: str = "exact", tol: float = 1e-10) -> StainFit:
    """Sparse NMF on tissue pixels, then densities for every pixel.

    The objective 0.5 ||V - WH||^2 + lambda ||H||_1, with stain vectors of
    norm at most one, is tracked per iteration (index 0 is the starting
    point). H is minimized exactly per pixel (``h_step="exact"``) or by a
    multiplicative update (``"mu"``), and W takes projected-gradient steps,
    so no half-step can increase it. Iteration stops after ``iters`` rounds
    or once the relative decrease falls below ``tol``. Columns of W are rescaled to unit norm
    at the end. Per-pixel densities are then solved exactly for that basis
    with penalty ``density_lambda`` (0 by default so re-painting stays
    faithful to the source).
    """
    v_all = od.flat()
    tissue = tissue_mask(od, threshold)
    if tissue.mean() < MIN_TISSUE_FRACTION:
        raise StainError(f"tile has no tissue: {tissue.sum()} of {tissue.size} pixels above OD {threshold}")
    v = v_all[:, tissue]
    w = (RUIFROK_HE if init is None else np.asarray(init, dtype=float)).copy()
    w /= np.linalg.norm(w, axis=0)
    h = _initial_density(v, w)
    vnorm = np.linalg.norm(v)
    fit = StainFit(None, None, tissue)
    fit.objective.append(snmf_objective(v, w, h, lambda_sparse))
    fit.rel_error.append(float(np.linalg.norm(v - w @ h) / vnorm))
    for _ in range(iters):
        h = solve_density(v, w, lambda_sparse) if h_step == "exact" else _update_h(v, w, h, lambda_sparse)
        w = _update_w(v, w, h)
        fit.objective.append(snmf_objective(v, w, h, lambda_sparse))
        fit.rel_error.append(float(np.linalg.norm(v - w @ h) / vnorm))
        if fit.objective[-2] - fit.objective[-1] <= tol * fit.objective[-2]:
            break
    norms = np.linalg.norm(w, axis=0)
    w = w / np.where(norms > 0, norms, 1.0)
    if w[2, 0] < w[2, 1]:
        w = w[:, ::-1]
    density = solve_density(v_all, w, density_lambda)
    fit.basis = StainBasis(w)
    fit.density = density
    return fit


def density_percentiles(fit: StainFit, q: float = PERCENTILE) -> np.ndarray:
    return np.percentile(fit.density[:, fit.tissue], q, axis=1)


def reference_basis(pixels, lambda_sparse: float = LAMBDA_SPARSE, iters: int = N_ITER) -> StainBasis:
    """Stain basis plus percentile densities of a reference tile."""
    fit = fit_stain_basis(rgb_to_od(pixels), lambda_sparse, iters)
    return StainBasis(fit.basis.w, density_percentiles(fit))


def normalize_to_reference(src_pixels, ref: StainBasis, ref_max_density=None,
                           lambda_sparse: float = LAMBDA_SPARSE, iters: int = N_ITER) -> np.ndarray:
    """Re-paint ``src_pixels`` with the reference stain colors.

    Source densities are reused as fitted, only rescaled so their 99th
    percentile matches the reference. Tiles without tissue come back unchanged.
    """
    src = np.asarray(src_pixels)
    target = ref.max_density if ref_max_density is None else np.asarray(ref_max_density, dtype=float)
    if target is None:
        raise StainError("reference max densities are required")
    od = rgb_to_od(src)
    if tissue_mask(od).mean() < MIN_TISSUE_FRACTION:
        return src.astype(np.uint8).copy()
    fit = fit_stain_basis(od, lambda_sparse, iters)
    src_max = density_percentiles(fit)
    scale = np.divide(target, src_max, out=np.ones(2), where=src_max > 0)
    od_norm = (ref.w @ (fit.density * scale[:, None])).T.reshape(od.od.shape)
    return od_to_rgb(od_norm)


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def write_png(path, pixels: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(pixels, dtype=np.uint8), "RGB").save(path)
