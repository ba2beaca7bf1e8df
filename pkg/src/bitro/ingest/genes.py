"""Gene selection (binned dispersion HVGs) and expression normalization."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from bitro.ingest.tables import DatasetError, ExpressionFrame, ParseError
from bitro.numerics import ContractError

log = logging.getLogger(__name__)

EXCLUDE_PREFIXES = ("MT-", "RPS", "RPL")
DEFAULT_BINS = 20
DEFAULT_TOP_HVG = 2000
ZSCORE_EPS = 1e-8


@dataclass
class HvgResult:
    candidates: list[str]
    z: dict[str, pd.Series] = field(default_factory=dict)  # per sample
    flagged_bins: dict[str, list[int]] = field(default_factory=dict)

    def best_z(self) -> pd.Series:
        return pd.concat(self.z.values(), axis=1).max(axis=1) if self.z else pd.Series(dtype=float)


def excluded(gene: str, prefixes=EXCLUDE_PREFIXES) -> bool:
    return any(gene.upper().startswith(p) for p in prefixes)


def dispersion_z(values: np.ndarray, n_bins: int = DEFAULT_BINS) -> tuple[np.ndarray, list[int]]:
    """Bin-normalized dispersion z-scores for one sample (units x genes, log1p).

    Genes are split into ``n_bins`` equal-occupancy bins by mean expression;
    bins whose dispersion SD is zero get z = 0 and are reported.
    """
    if n_bins < 1:
        raise ContractError("n_bins must be >= 1")
    mean = values.mean(axis=0)
    var = values.var(axis=0)
    disp = np.divide(var, mean, out=np.zeros_like(var), where=mean > 0)
    g = len(mean)
    n_bins = min(n_bins, g)
    order = np.argsort(mean, kind="stable")
    bins = np.empty(g, dtype=np.intp)
    bins[order] = np.arange(g) * n_bins // g
    z = np.zeros(g)
    flagged = []
    for b in range(n_bins):
        members = bins == b
        if not members.any():
            continue
        mu, sd = disp[members].mean(), disp[members].std()
        if sd == 0:
            flagged.append(b)
            continue
        z[members] = (disp[members] - mu) / sd
    return z, flagged


def select_hvgs(frames: dict[str, ExpressionFrame], n_bins: int = DEFAULT_BINS,
                top_k: int = DEFAULT_TOP_HVG, exclude=EXCLUDE_PREFIXES) -> HvgResult:
    """Union of each sample's top-``top_k`` genes by dispersion z-score."""
    result = HvgResult([])
    pool: set[str] = set()
    for sid, frame in frames.items():
        if frame.space_tag != "log1p":
            raise ContractError(f"{sid}: HVG selection expects log1p values, got {frame.space_tag}")
        z, flagged = dispersion_z(frame.values, n_bins)
        if flagged:
            log.warning("%s: %d dispersion bin(s) with zero spread, z set to 0", sid, len(flagged))
        series = pd.Series(z, index=frame.gene_names)
        result.z[sid] = series
        result.flagged_bins[sid] = flagged
        keep = [(-zv, gname) for gname, zv in series.items() if not excluded(gname, exclude)]
        keep.sort()
        pool.update(gname for _, gname in keep[:top_k])
    result.candidates = sorted(pool)
    return result


def _top_k(scores: dict[str, float], k: int) -> set[str]:
    ranked = sorted(scores, key=lambda g: (-scores[g], g))
    return set(ranked[:k])


def final_gene_set(candidates: list[str], frames: list[ExpressionFrame], k: int,
                   cap: int | None = None, hvg_scores: pd.Series | None = None) -> list[str]:
    """Top-K by cohort mean intersected with top-K by cohort SD, among candidates.

    With ``cap`` set, an over-large intersection is trimmed to the ``cap``
    genes with the highest HVG score (gene name breaks ties).
    """
    if not candidates:
        raise DatasetError("no candidate genes")
    stacked = pd.concat([pd.DataFrame(f.values, columns=f.gene_names) for f in frames], ignore_index=True)
    stacked = stacked[list(candidates)]
    mu = stacked.mean(axis=0).to_dict()
    sd = stacked.std(axis=0, ddof=0).to_dict()
    chosen = _top_k(mu, k) & _top_k(sd, k)
    if not chosen:
        raise DatasetError(f"top-{k} mean and top-{k} SD genes do not overlap; try a larger K")
    genes = sorted(chosen)
    if cap is not None and len(genes) > cap:
        score = hvg_scores if hvg_scores is not None else pd.Series(sd)
        genes = sorted(genes, key=lambda g: (-float(score.get(g, -np.inf)), g))[:cap]
        genes.sort()
    return genes


# ---------------------------------------------------------------------------
# normalization


@dataclass
class NormStats:
    genes: list[str]
    mu: np.ndarray
    sigma: np.ndarray
    eps: float = ZSCORE_EPS

    @classmethod
    def fit(cls, frame: ExpressionFrame, eps: float = ZSCORE_EPS) -> "NormStats":
        if frame.space_tag != "log1p":
            raise ContractError("normalization statistics are fit in log1p space")
        return cls(list(frame.gene_names), frame.values.mean(axis=0), frame.values.std(axis=0), eps)

    def write(self, path) -> None:
        pd.DataFrame({"gene": self.genes, "mu": self.mu, "sigma": self.sigma}).to_csv(
            path, sep="\t", index=False, float_format="%.17g")

    @classmethod
    def read(cls, path, eps: float = ZSCORE_EPS) -> "NormStats":
        path = Path(path)
        if not path.exists():
            raise ParseError(f"missing file: {path}")
        df = pd.read_csv(path, sep="\t", float_precision="round_trip")
        return cls(df["gene"].astype(str).tolist(), df["mu"].to_numpy(float), df["sigma"].to_numpy(float), eps)

    def scale(self) -> np.ndarray:
        return self.sigma + self.eps


def to_log1p(frame: ExpressionFrame) -> ExpressionFrame:
    if frame.space_tag == "log1p":
        return frame
    if frame.space_tag != "raw_counts":
        raise ContractError(f"cannot log-transform values in {frame.space_tag} space")
    return replace(frame, values=np.log1p(frame.values), space_tag="log1p")


def normalize_expression(frame: ExpressionFrame, stats: NormStats | None = None,
                         eps: float = ZSCORE_EPS) -> tuple[ExpressionFrame, NormStats]:
    """log1p (if raw) then gene-wise z-score; ``stats`` come from the training split."""
    if frame.space_tag == "zscore":
        raise ContractError("expression is already z-scored")
    frame = to_log1p(frame)
    if stats is None:
        stats = NormStats.fit(frame, eps)
    if list(stats.genes) != list(frame.gene_names):
        raise ContractError("normalization statistics are for a different gene list")
    values = (frame.values - stats.mu) / stats.scale()
    return replace(frame, values=values, space_tag="zscore"), stats


def denormalize(frame: ExpressionFrame, stats: NormStats) -> ExpressionFrame:
    if frame.space_tag != "zscore":
        raise ContractError(f"denormalize expects z-scored values, got {frame.space_tag}")
    return replace(frame, values=frame.values * stats.scale() + stats.mu, space_tag="log1p")
