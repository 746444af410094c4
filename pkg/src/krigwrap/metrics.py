"""Error metrics in original signal units."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import Scaler


@dataclass
class MetricReport:
    mae: float
    rmse: float
    mape: Optional[float]     # percent; None when too many targets are near zero
    n_entries: int
    mape_excluded: int


def compute_metrics(Y_hat, Y, valid_mask, scaler: Optional[Scaler] = None, eps: float = 1.0,
                    max_excluded: float = 0.5) -> MetricReport:
    """MAE / RMSE / MAPE over entries with ``valid_mask == 1``.

    Inputs are denormalized with ``scaler`` first when one is given. MAPE skips targets with
    ``|Y| < eps`` and is dropped entirely when more than ``max_excluded`` of entries are skipped.
    """
    Y_hat, Y = np.asarray(Y_hat, dtype=float), np.asarray(Y, dtype=float)
    sel = np.asarray(valid_mask).astype(bool)
    if Y_hat.shape != Y.shape or sel.shape != Y.shape:
        raise ValueError("prediction, target and mask shapes differ")
    if not sel.any():
        raise ValueError("empty valid set")
    if scaler is not None:
        Y_hat, Y = scaler.inverse(Y_hat), scaler.inverse(Y)
    err = (Y_hat - Y)[sel]
    y = Y[sel]
    mae = float(np.abs(err).mean())
    rmse = float(np.sqrt((err ** 2).mean()))
    keep = np.abs(y) >= eps
    excluded = int((~keep).sum())
    mape = None
    if keep.any() and excluded <= max_excluded * y.size:
        mape = float(100.0 * np.abs(err[keep] / y[keep]).mean())
    return MetricReport(mae, max(rmse, mae), mape, int(y.size), excluded)
