"""Simple pre-imputation proxies (mean of node, last observation carried forward).

They stand in for a dedicated two-stage imputation model: missing observed entries are filled
before the vanilla backbone sees them.
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from .sampling import PanelView

IMPUTERS = ("mean", "locf")


def impute_mean(values, mask):
    """Fill each row's missing entries with that row's mean over available entries (0 if none)."""
    m = mask.astype(bool)
    cnt = m.sum(1, keepdims=True)
    mean = np.where(cnt > 0, (values * m).sum(1, keepdims=True) / np.maximum(cnt, 1), 0.0)
    return np.where(m, values, mean)


def impute_locf(values, mask):
    """Carry the last available value forward; leading gaps take the first available value."""
    m = mask.astype(bool)
    T = values.shape[1]
    idx = np.where(m, np.arange(T)[None, :], -1)
    last = np.maximum.accumulate(idx, axis=1)
    first = np.where(m.any(1), m.argmax(1), -1)
    src = np.where(last >= 0, last, first[:, None])
    filled = np.take_along_axis(values, np.clip(src, 0, None), axis=1)
    filled = np.where(src >= 0, filled, 0.0)
    return np.where(m, values, filled)


def preimpute_view(view: PanelView, method: str) -> PanelView:
    """Impute missing entries of observed rows; unobserved rows stay zero and masked."""
    if method not in IMPUTERS:
        raise ValueError(f"unknown imputer {method!r}; expected one of {IMPUTERS}")
    fn = impute_mean if method == "mean" else impute_locf
    values = view.values.copy()
    obs = view.observed_ids
    values[obs] = fn(view.values[obs], view.input_mask[obs])
    return replace(view, values=values)
