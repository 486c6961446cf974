"""Principal-component extraction from a fully observed auxiliary block.

Components are computed by SVD of the standardized data matrix (robust to
rank deficiency, so p > n blocks are fine); the retained count is the
smallest prefix whose cumulative explained share reaches the target.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import DataError, standardize

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PcaModel:
    centers: np.ndarray
    scales: np.ndarray
    kept_columns: np.ndarray  # indices of the non-degenerate auxiliary columns
    n_columns: int            # width of the original auxiliary block
    loadings: np.ndarray      # (len(kept_columns), c), orthonormal columns
    explained: np.ndarray     # (c,) descending variance shares

    @property
    def c(self) -> int:
        return self.loadings.shape[1]


def pca_fit(A: np.ndarray, var_target: float) -> PcaModel:
    """Fit components on the standardized block until ``var_target`` of the
    total variance is explained; rank is capped at min(n-1, q)."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] < 2 or A.shape[1] < 1:
        raise DataError("pca_fit expects an n x q matrix with n >= 2, q >= 1")
    if not 0.0 < var_target <= 1.0:
        raise ValueError(f"var_target must be in (0, 1], got {var_target}")
    n, q = A.shape
    probe_std = standardize(A)[1]
    kept = np.nonzero(~probe_std.degenerate)[0]
    if kept.shape[0] == 0:
        raise DataError("every auxiliary column is constant; nothing to extract")
    if kept.shape[0] < q:
        logger.warning("dropping %d constant auxiliary column(s)", q - kept.shape[0])
    Z, std = standardize(A[:, kept])

    _, s, Vt = np.linalg.svd(Z, full_matrices=False)
    rank = min(n - 1, kept.shape[0])
    s = s[:rank]
    Vt = Vt[:rank]
    var = s * s  # component variances up to the common 1/(n-1) factor
    shares = var / var.sum()
    cum = np.cumsum(shares)
    c = int(np.searchsorted(cum, var_target - 1e-12) + 1)
    c = min(c, rank)

    loadings = Vt[:c].T.copy()
    # deterministic orientation: largest-magnitude entry of each column positive
    for k in range(c):
        i = int(np.argmax(np.abs(loadings[:, k])))
        if loadings[i, k] < 0:
            loadings[:, k] = -loadings[:, k]
    return PcaModel(
        centers=std.centers,
        scales=std.scales,
        kept_columns=kept,
        n_columns=q,
        loadings=loadings,
        explained=shares[:c],
    )


def pca_scores(model: PcaModel, A: np.ndarray) -> np.ndarray:
    """Project rows onto the retained components (standardized-A @ loadings)."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[1] != model.n_columns:
        raise ValueError(
            f"A has {A.shape[1] if A.ndim == 2 else '?'} columns, model expects {model.n_columns}"
        )
    Z = (A[:, model.kept_columns] - model.centers) / model.scales
    return Z @ model.loadings
