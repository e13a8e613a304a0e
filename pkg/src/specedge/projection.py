"""Feasibility layer mapping raw per-pair fractions onto the allocation constraints."""

from __future__ import annotations

import numpy as np


def project_actions(Y_raw: np.ndarray, Z_raw: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return feasible ``(Y, Z)`` for association ``X``.

    Entries are clipped to [0, 1] and masked by ``X`` (a device consumes no
    bandwidth or compute at servers it is not associated with). Rows of ``Y``
    are then scaled so ``sum_j y_ij <= 1``, and columns so that
    ``sum_i x_ij y_ij <= 1`` and ``sum_i z_ij <= 1``. Columns already within
    budget are left alone, so the map is idempotent.
    """
    X = np.asarray(X, dtype=float)
    Y = np.clip(np.asarray(Y_raw, dtype=float), 0.0, 1.0) * X
    Z = np.clip(np.asarray(Z_raw, dtype=float), 0.0, 1.0) * X
    Y = Y / np.maximum(Y.sum(axis=1, keepdims=True), 1.0)
    Y = Y / np.maximum((X * Y).sum(axis=0, keepdims=True), 1.0)
    Z = Z / np.maximum(Z.sum(axis=0, keepdims=True), 1.0)
    return Y, Z


def project_work_conserving(Y_raw: np.ndarray, Z_raw: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Like :func:`project_actions`, but every used compute column is scaled to sum exactly 1.

    Compute shares carry no energy cost, so leaving server capacity idle never
    helps; the raw ``Z`` entries then only express relative priorities.
    """
    Y, Z = project_actions(Y_raw, Z_raw, X)
    col = Z.sum(axis=0, keepdims=True)
    Z = np.divide(Z, col, out=np.zeros_like(Z), where=col > 0)
    return Y, Z
