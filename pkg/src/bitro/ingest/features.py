from __future__ import annotations

import hashlib

import numpy as np

from bitro.ingest.pca import DEFAULT_INPUT_WIDTH


def stub_features(sample_id: str, cell_ids, seed: int = 0, width: int = DEFAULT_INPUT_WIDTH) -> np.ndarray:
    """Deterministic stand-in for foundation-model cell embeddings.

    Each row is a Gaussian vector keyed on (seed, sample_id, cell_id), so the
    same cell always gets the same features regardless of row order.
    """
    rows = []
    for cid in np.asarray(cell_ids).tolist():
        key = hashlib.sha256(f"{seed}:{sample_id}:{cid}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(key[:8], "little"))
        rows.append(rng.standard_normal(width))
    return np.array(rows).reshape(-1, width)
