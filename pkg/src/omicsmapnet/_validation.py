"""Input checks shared by the estimators."""

import numpy as np

from .errors import NonFiniteFeature, ShapeMismatch


def check_images(X) -> np.ndarray:
    """Coerce to a finite (N, H, W, C) array with square images."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ShapeMismatch(f"expected images shaped (N, H, W, C), got {X.shape}")
    if X.shape[1] != X.shape[2]:
        raise ShapeMismatch(f"images must be square, got {X.shape[1]}x{X.shape[2]}")
    if not np.issubdtype(X.dtype, np.floating):
        X = X.astype(np.float64)
    if not np.isfinite(X).all():
        raise NonFiniteFeature("images contain NaN or infinity")
    return X


def check_expression(X, gene_ids=None):
    """Samples x genes values plus the gene ids naming the columns.

    Accepts a DataFrame (ids from the columns), an ExpressionMatrix (which is
    genes x samples and gets transposed) or an array with ``gene_ids``.
    """
    if hasattr(X, "norm_factors") and hasattr(X, "gene_ids"):
        values, genes = np.asarray(X.values, dtype=np.float64).T, list(X.gene_ids)
    elif hasattr(X, "columns"):
        values, genes = X.to_numpy(dtype=np.float64), [str(c) for c in X.columns]
    else:
        values = np.asarray(X, dtype=np.float64)
        if gene_ids is None:
            raise ValueError("gene_ids are required for array input")
        genes = list(gene_ids)
    if values.ndim != 2 or values.shape[1] != len(genes):
        raise ShapeMismatch(f"expression table {values.shape} does not match {len(genes)} gene ids")
    if not np.isfinite(values).all():
        raise NonFiniteFeature("expression table contains NaN or infinity")
    return values, genes


def encode_labels(y):
    """Sorted class array and the integer code of every label."""
    y = np.asarray(y)
    if y.ndim != 1:
        raise ShapeMismatch("labels must be one-dimensional")
    classes, codes = np.unique(y, return_inverse=True)
    if classes.size < 2:
        raise ValueError("need at least two classes")
    return classes, codes.astype(np.intp)
