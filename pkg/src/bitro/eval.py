"""Expression metrics and cross-validation protocols."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd

JS_EPS = 1e-12
PROTOCOLS = ("loo", "split_4_1", "spatial_5fold")


class MetricError(ValueError):
    pass


class ProtocolError(ValueError):
    pass


def pcc_overall(y, y_hat) -> float:
    """Pearson correlation across genes within one unit; NaN if either side is constant."""
    y, y_hat = np.asarray(y, dtype=float), np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape or y.ndim != 1:
        raise MetricError("pcc_overall takes two vectors of equal length")
    if len(y) < 2:
        raise MetricError("pcc_overall needs at least two genes")
    a, b = y - y.mean(), y_hat - y_hat.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b) / den if den > 0 else float("nan")


def pcc_gene(y, y_hat) -> np.ndarray:
    """Column-wise Pearson correlation across units; NaN for constant columns."""
    y, y_hat = np.asarray(y, dtype=float), np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape or y.ndim != 2:
        raise MetricError("pcc_gene takes two M x G matrices of equal shape")
    if y.shape[0] < 2:
        raise MetricError("pcc_gene needs at least two units")
    a, b = y - y.mean(axis=0), y_hat - y_hat.mean(axis=0)
    den = np.sqrt((a * a).sum(axis=0) * (b * b).sum(axis=0))
    num = (a * b).sum(axis=0)
    out = np.full(y.shape[1], np.nan)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


def _simplex(p: np.ndarray) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=float), 0.0, None)
    if not np.any(p > 0):
        raise MetricError("JS divergence of an all-zero (or all-negative) vector is undefined")
    p = p + JS_EPS
    return p / p.sum()


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence (natural log) after clamping and renormalizing."""
    p, q = _simplex(p), _simplex(q)
    if p.shape != q.shape:
        raise MetricError("JS inputs differ in length")
    m = 0.5 * (p + q)
    return float(0.5 * np.sum(p * np.log(p / m)) + 0.5 * np.sum(q * np.log(q / m)))


def _mean_sd(x) -> tuple[float, float, int]:
    x = np.asarray(x, dtype=float)
    x = x[np.isfinite(x)]
    if len(x) == 0:
        return float("nan"), float("nan"), 0
    return float(x.mean()), float(x.std(ddof=1)) if len(x) > 1 else 0.0, len(x)


@dataclass
class EvalReport:
    unit_ids: list[str]
    gene_names: list[str]
    per_unit_pcc: np.ndarray
    per_unit_js: np.ndarray
    per_gene_pcc: np.ndarray  # folds x G
    unit_fold: np.ndarray
    meta: dict = field(default_factory=dict)
    y: np.ndarray | None = None
    y_hat: np.ndarray | None = None

    @classmethod
    def from_predictions(cls, unit_ids, gene_names, y, y_hat, fold: int = 0, meta=None) -> "EvalReport":
        y, y_hat = np.asarray(y, dtype=float), np.asarray(y_hat, dtype=float)
        per_gene = pcc_gene(y, y_hat) if len(y) >= 2 else np.full(y.shape[1], np.nan)
        return cls(list(unit_ids), list(gene_names),
                   np.array([pcc_overall(a, b) for a, b in zip(y, y_hat)]),
                   np.array([js_divergence(a, b) for a, b in zip(y, y_hat)]),
                   per_gene[None, :], np.full(len(y), fold), dict(meta or {}), y, y_hat)

    @classmethod
    def combine(cls, reports: list["EvalReport"], meta=None) -> "EvalReport":
        genes = reports[0].gene_names
        if any(r.gene_names != genes for r in reports):
            raise MetricError("fold reports cover different genes")
        return cls(sum((r.unit_ids for r in reports), []), genes,
                   np.concatenate([r.per_unit_pcc for r in reports]),
                   np.concatenate([r.per_unit_js for r in reports]),
                   np.concatenate([r.per_gene_pcc for r in reports]),
                   np.concatenate([r.unit_fold for r in reports]), dict(meta or {}),
                   np.concatenate([r.y for r in reports]), np.concatenate([r.y_hat for r in reports]))

    def pooled_gene_pcc(self) -> np.ndarray:
        """Per-gene PCC over all test units of all folds (useful when folds hold one unit)."""
        if self.y is None or len(self.y) < 2:
            return np.full(len(self.gene_names), np.nan)
        return pcc_gene(self.y, self.y_hat)

    def summary(self) -> dict:
        pcc_m, pcc_s, n_units = _mean_sd(self.per_unit_pcc)
        gene_m, gene_s, n_genes = _mean_sd(self.per_gene_pcc)
        js_m, js_s, _ = _mean_sd(self.per_unit_js)
        pooled_m, pooled_s, _ = _mean_sd(self.pooled_gene_pcc())
        return {
            "pcc_overall_mean": pcc_m, "pcc_overall_sd": pcc_s,
            "pcc_gene_mean": gene_m, "pcc_gene_sd": gene_s,
            "js_mean": js_m, "js_sd": js_s,
            "pcc_gene_pooled_mean": pooled_m, "pcc_gene_pooled_sd": pooled_s,
            "n_units": len(self.unit_ids), "n_genes": len(self.gene_names),
            "n_folds": int(self.per_gene_pcc.shape[0]),
            "skipped_units": len(self.unit_ids) - n_units,
            "skipped_genes": int(self.per_gene_pcc.size) - n_genes,
            **self.meta,
        }

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        units = pd.DataFrame({"kind": "unit", "fold": self.unit_fold, "id": self.unit_ids,
                              "pcc": self.per_unit_pcc, "js": self.per_unit_js})
        folds, genes = np.indices(self.per_gene_pcc.shape)
        gene_rows = pd.DataFrame({"kind": "gene", "fold": folds.ravel(),
                                  "id": [self.gene_names[g] for g in genes.ravel()],
                                  "pcc": self.per_gene_pcc.ravel(), "js": np.nan})
        pd.concat([units, gene_rows]).to_csv(out / "eval_report.tsv", sep="\t", index=False,
                                             float_format="%.17g", na_rep="nan")
        summary = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in self.summary().items()}
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# protocols


def strip_edges(x: np.ndarray, n: int = 5) -> np.ndarray:
    """Interior boundaries of ``n`` equal-count strips along x."""
    return np.quantile(np.asarray(x, dtype=float), np.arange(1, n) / n)


def _strip_of(x: np.ndarray, edges: np.ndarray) -> np.ndarray:
    return np.searchsorted(edges, x, side="right")


def spatial_subsample(sample, strips: set[int], edges: np.ndarray, tag: str):
    """Cells and spots of ``sample`` whose x falls in ``strips``."""
    from bitro.pipeline import Sample

    if sample.expr.unit_coords is None:
        raise ProtocolError(f"{sample.id}: spatial folds need spot coordinates")
    keep_cells = np.isin(_strip_of(sample.cells.coords[:, 0], edges), list(strips))
    keep_units = np.flatnonzero(np.isin(_strip_of(sample.expr.unit_coords[:, 0], edges), list(strips)))
    if not keep_cells.any() or len(keep_units) == 0:
        raise ProtocolError(f"{sample.id}: strip {sorted(strips)} is empty")
    return Sample(f"{sample.id}{tag}", sample.cells.subset(np.flatnonzero(keep_cells)),
                  sample.expr.select_units(keep_units), sample.task)


def make_folds(samples: list, protocol: str, seed: int = 0, n_strips: int = 5):
    """List of (train_samples, test_samples) pairs for ``protocol``."""
    if protocol not in PROTOCOLS:
        raise ProtocolError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    n = len(samples)
    if protocol == "loo":
        if n < 2:
            raise ProtocolError("leave-one-out needs at least two samples")
        return [([s for j, s in enumerate(samples) if j != i], [samples[i]]) for i in range(n)]
    if protocol == "split_4_1":
        if n < 2:
            raise ProtocolError("a 4:1 split needs at least two samples")
        order = np.random.default_rng(seed).permutation(n)
        n_test = min(n - 1, max(1, int(round(n / 5))))
        test = set(order[:n_test].tolist())
        return [([s for i, s in enumerate(samples) if i not in test],
                 [s for i, s in enumerate(samples) if i in test])]
    folds = []
    edges = {s.id: strip_edges(s.cells.coords[:, 0], n_strips) for s in samples}
    for f in range(n_strips):
        rest = set(range(n_strips)) - {f}
        train = [spatial_subsample(s, rest, edges[s.id], f"/train{f}") for s in samples]
        test = [spatial_subsample(s, {f}, edges[s.id], f"/strip{f}") for s in samples]
        folds.append((train, test))
    return folds


# fit_fold(train_samples, fold) -> predict(test_samples) -> (unit_ids, genes, y_true, y_pred), log1p space
FoldFitter = Callable[[list, int], Callable[[list], tuple]]


def run_protocol(samples: list, protocol: str, fit_fold: FoldFitter, seed: int = 0,
                 workers: int = 1, meta: dict | None = None) -> EvalReport:
    folds = make_folds(samples, protocol, seed)

    def _run(item):
        i, (train, test) = item
        unit_ids, genes, y, y_hat = fit_fold(train, i)(test)
        return EvalReport.from_predictions(unit_ids, genes, y, y_hat, fold=i)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_run, enumerate(folds)))
    else:
        reports = [_run(item) for item in enumerate(folds)]
    info = {"protocol": protocol, "seed": seed, "metric_space": "log1p",
            "folds": [[s.id for s in test] for _, test in folds]}
    info.update(meta or {})
    return EvalReport.combine(reports, info)
