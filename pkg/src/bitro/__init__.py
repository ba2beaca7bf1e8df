"""Gene expression prediction from per-cell features with graph attention, a
transformer encoder and gene-query multiple-instance pooling."""

__version__ = "0.1.0"
