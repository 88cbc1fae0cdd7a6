"""Input validation helpers shared by the estimators and loss functions."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import (
    InvalidSimilarity,
    NonPositiveAlpha,
    NotOneHot,
    ShapeMismatch,
)

SIM_TOL = 1e-9


def check_similarity(S, square: bool = True) -> np.ndarray:
    """Return ``S`` as a finite float64 matrix with entries in [-1, 1]."""
    try:
        S = check_array(S, dtype=np.float64, ensure_2d=True, ensure_min_samples=1)
    except ValueError as exc:
        raise InvalidSimilarity(str(exc)) from exc
    if square and S.shape[0] != S.shape[1]:
        raise ShapeMismatch(f"similarity matrix must be square, got {S.shape}")
    if np.any(np.abs(S) > 1.0 + SIM_TOL):
        raise InvalidSimilarity("similarity entries must lie in [-1, 1]")
    return S


def check_alpha(alpha) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    if alpha.size == 0 or not np.all(np.isfinite(alpha)) or np.any(alpha <= 0):
        raise NonPositiveAlpha("Dirichlet parameters must be finite and > 0")
    return alpha


def check_one_hot(y, size: int) -> int:
    """Validate a one-hot vector and return the index of its 1."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size != size:
        raise ShapeMismatch(f"target has length {y.size}, expected {size}")
    hot = np.flatnonzero(y == 1.0)
    if hot.size != 1 or np.count_nonzero(y) != 1:
        raise NotOneHot("target must contain exactly one 1 and zeros elsewhere")
    return int(hot[0])


def check_labels(labels, K: int):
    if len(labels.pair_index) != K or len(labels.identity) != K or len(labels.treat_as_noisy) != K:
        raise ShapeMismatch(f"batch labels do not match batch size {K}")
    pi = np.asarray(labels.pair_index)
    if np.any((pi < 0) | (pi >= K)):
        raise ShapeMismatch("pair_index entries must lie in [0, K)")
