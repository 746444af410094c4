"""Window/node encoders, donor retrieval, virtual-sequence composition and masked injection."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import encode_time_features
from .sampling import Batch, PanelView, SubgraphSample


def _ffn(d_in, d_out):
    return nn.Sequential(nn.Linear(d_in, d_in), nn.ReLU(), nn.Linear(d_in, d_out))


class WindowEncoder(nn.Module):
    def __init__(self, t: int, d_p: int = 3, d_tau: int = 32, d_w: int = 32):
        super().__init__()
        self.proj_signal = nn.Linear(t, d_tau)
        self.proj_period = nn.Linear(t * d_p, d_tau)
        self.fuse = nn.Linear(2 * d_tau, d_tau)
        self.ffn = _ffn(d_tau, d_w)

    def forward(self, rho, P):
        """``rho [W,t]`` aggregated signal, ``P [W,t,d_p]`` time features -> unit ``[W,d_w]``."""
        z_x = F.normalize(self.proj_signal(rho), dim=-1)
        z_p = F.normalize(self.proj_period(P.flatten(-2)), dim=-1)
        h = F.relu(self.fuse(torch.cat([z_x, z_p], dim=-1)))
        return F.normalize(self.ffn(h), dim=-1)


class NodeEncoder(nn.Module):
    def __init__(self, T: int, d_e: int, d_o: int = 32, d_n: int = 32):
        super().__init__()
        self.proj_series = nn.Linear(T, d_o)
        self.proj_exo = nn.Linear(d_e, d_o)
        self.fuse = nn.Linear(2 * d_o, d_o)
        self.ffn = _ffn(d_o, d_n)

    def forward(self, series, exo):
        z_x = F.normalize(self.proj_series(series), dim=-1)
        z_g = F.normalize(self.proj_exo(exo), dim=-1)
        h = F.relu(self.fuse(torch.cat([z_x, z_g], dim=-1)))
        return F.normalize(self.ffn(h), dim=-1)


# --------------------------------------------------------------------------- per-view tensors

def window_signals(values, mask, observed_ids, t: int):
    """Mask-aware node mean per step, cut into all ``T-t+1`` sliding windows.

    Returns ``(rho [W,t], retrievable [W])``; a window is retrievable when it holds at least
    one available entry.
    """
    obs = np.asarray(observed_ids)
    m = mask[obs].astype(float)
    cnt = m.sum(0)
    step_mean = np.where(cnt > 0, (values[obs] * m).sum(0) / np.maximum(cnt, 1), 0.0)
    W = values.shape[1] - t + 1
    if W < 1:
        raise ValueError(f"window length {t} exceeds horizon {values.shape[1]}")
    rho = np.lib.stride_tricks.sliding_window_view(step_mean, t)[:W]
    avail = np.lib.stride_tricks.sliding_window_view(cnt, t)[:W].sum(1) > 0
    return np.ascontiguousarray(rho), avail


@dataclass
class ViewTensors:
    """Cached torch tensors for one panel view (model dtype)."""
    rho: torch.Tensor             # [W, t]
    P: torch.Tensor               # [W, t, d_p]
    retrievable: torch.Tensor     # [W] bool
    series: torch.Tensor          # [N_obs, T] zero-filled
    exo: torch.Tensor             # [N_obs, d_e]
    donor_values: torch.Tensor    # [N_obs, W, t]
    donor_mask: torch.Tensor      # [N_obs, W, t]
    obs_pos: torch.Tensor         # [N_total] observed index or -1
    observed_ids: np.ndarray
    steps_per_day: int


def view_tensors(view: PanelView, node_features: np.ndarray, t: int, dtype=torch.float32) -> ViewTensors:
    rho, avail = window_signals(view.values, view.input_mask, view.observed_ids, t)
    tf = encode_time_features(view.n_steps, view.sample_period_minutes, view.start_offset_minutes)
    W = rho.shape[0]
    P = np.lib.stride_tricks.sliding_window_view(tf, t, axis=0)[:W].transpose(0, 2, 1)
    obs = view.observed_ids
    mask = torch.as_tensor(view.input_mask[obs], dtype=dtype)
    # donors only ever contribute real readings, whatever fill the view carries
    series = torch.as_tensor(view.values[obs], dtype=dtype) * mask
    obs_pos = torch.full((view.values.shape[0],), -1, dtype=torch.long)
    obs_pos[torch.as_tensor(obs)] = torch.arange(obs.size)
    return ViewTensors(
        rho=torch.as_tensor(rho, dtype=dtype), P=torch.as_tensor(np.ascontiguousarray(P), dtype=dtype),
        retrievable=torch.as_tensor(avail), series=series,
        exo=torch.as_tensor(node_features[obs], dtype=dtype),
        donor_values=series.unfold(1, t, 1)[:, :W], donor_mask=mask.unfold(1, t, 1)[:, :W],
        obs_pos=obs_pos, observed_ids=obs, steps_per_day=view.steps_per_day)


def encode_windows(vt: ViewTensors, encoder: WindowEncoder) -> torch.Tensor:
    return encoder(vt.rho, vt.P)


def encode_nodes(vt: ViewTensors, encoder: NodeEncoder) -> torch.Tensor:
    return encoder(vt.series, vt.exo)


# --------------------------------------------------------------------------- retrieval

@dataclass
class RetrievalIndex:
    window_embeddings: torch.Tensor   # [W, d_w]
    node_embeddings: torch.Tensor     # [N_obs, d_n]
    retrievable: torch.Tensor         # [W]
    node_ids: np.ndarray              # global ids of the node rows
    K_w: int = 5
    K_n: int = 8
    tau_w: float = 0.1
    tau_n: float = 0.1
    exclusion_radius: int = 1         # windows with |start - anchor| < radius are skipped
    steps_per_day: int = 288

    def __post_init__(self):
        S = self.node_embeddings @ self.node_embeddings.T
        S.fill_diagonal_(-torch.inf)
        order = torch.sort(S, dim=1, descending=True, stable=True).indices
        self.node_order = order[:, :-1]   # self sorts last

    def window_candidates(self, anchor: int) -> torch.Tensor:
        W = self.window_embeddings.shape[0]
        ok = self.retrievable.clone()
        lo, hi = max(anchor - self.exclusion_radius + 1, 0), min(anchor + self.exclusion_radius, W)
        ok[lo:hi] = False
        return ok


def build_index(vt: ViewTensors, window_encoder, node_encoder, **kw) -> RetrievalIndex:
    with torch.no_grad():
        e_w = encode_windows(vt, window_encoder)
        e_n = encode_nodes(vt, node_encoder)
    return RetrievalIndex(e_w, e_n, vt.retrievable, vt.observed_ids,
                          steps_per_day=vt.steps_per_day, **kw)


def retrieve_windows(index: RetrievalIndex, anchors: torch.Tensor):
    """Top-``K_w`` windows per anchor start, ties to the lower index. Returns ``(Q [B,K], short)``."""
    E = index.window_embeddings
    scores = E[anchors] @ E.T
    W = E.shape[0]
    pos = torch.arange(W)
    excluded = (pos[None, :] - anchors[:, None]).abs() < index.exclusion_radius
    excluded |= ~index.retrievable[None, :]
    scores = scores.masked_fill(excluded, -torch.inf)
    n_valid = int((~excluded).sum(1).min())
    k = min(index.K_w, n_valid)
    if k == 0:
        raise ValueError("no donors: no retrievable windows")
    order = torch.sort(scores, dim=1, descending=True, stable=True).indices
    return order[:, :k], k < index.K_w


def retrieve_nodes(index: RetrievalIndex, rows: torch.Tensor, exclude: Optional[torch.Tensor] = None):
    """Top-``K_n`` donor nodes for observed-index ``rows [...]``.

    ``exclude [B,u]`` drops extra candidates per sample (pseudo-targets during training);
    ``rows`` then has shape ``[B,n]``. Returns ``(J [...,K], short)``.
    """
    cand = index.node_order[rows.clamp(min=0)]
    L = cand.shape[-1]
    n_excl = 0
    if exclude is not None and exclude.numel():
        ex = exclude.view(exclude.shape[0], *([1] * (rows.dim() - 1)), 1, exclude.shape[-1])
        bad = (cand.unsqueeze(-1) == ex).any(-1)
        n_excl = exclude.shape[-1]
        cand = torch.gather(cand, -1, torch.argsort(bad.to(torch.int8), dim=-1, stable=True))
    k = min(index.K_n, L - n_excl)
    if k <= 0:
        raise ValueError("no donors: no candidate nodes")
    return cand[..., :k], k < index.K_n


def retrieve(index: RetrievalIndex, current_window: int, node: int):
    """Single-query lookup: ``(window list, donor node list, truncated flag)``.

    ``node`` is a global node id and must be one of the indexed (observed) nodes.
    """
    Q, short_w = retrieve_windows(index, torch.tensor([current_window]))
    pos = int(np.flatnonzero(index.node_ids == node)[0])
    J, short_n = retrieve_nodes(index, torch.tensor([pos]))
    if short_w or short_n:
        warnings.warn("fewer candidates than requested K; returning all candidates")
    return Q[0].tolist(), index.node_ids[J[0].numpy()].tolist(), short_w or short_n


# --------------------------------------------------------------------------- composition

def joint_weights(s_w, s_n, donor_mask, tau_w: float, tau_n: float):
    """Masked, per-step softmax over all (window, node) donor pairs.

    ``s_w [...,K_w]``, ``s_n [...,K_n]``, ``donor_mask [...,K_w,K_n,t]`` -> weights of the same
    shape as the mask. Steps where every donor is missing fall back to uniform weights.
    """
    logits = s_w[..., :, None] / tau_w + s_n[..., None, :] / tau_n
    flat = logits.flatten(-2)
    flat = flat - flat.max(-1, keepdim=True).values.detach()
    e = torch.exp(flat).unsqueeze(-1)                # [..., P, 1]
    m = donor_mask.flatten(-3, -2)                    # [..., P, t]
    num = m * e
    den = num.sum(-2, keepdim=True)
    has = den > 0
    w = torch.where(has, num / torch.where(has, den, torch.ones_like(den)),
                    torch.full_like(num, 1.0 / num.shape[-2]))
    return w.view(donor_mask.shape)


def compose(donor_values, donor_mask, s_w, s_n, tau_w, tau_n):
    w = joint_weights(s_w, s_n, donor_mask, tau_w, tau_n)
    return (w * donor_values).sum((-3, -2)), w


def compose_zero_filled(donor_values, donor_mask, s_w, s_n, tau_w, tau_n):
    """Same result as :func:`compose` when ``donor_values`` is already zero where masked.

    Reduces the masked per-step softmax to two batched products instead of materializing
    the full ``[..., K_w, K_n, t]`` weight tensor.
    """
    logits = (s_w[..., :, None] / tau_w + s_n[..., None, :] / tau_n).flatten(-2)
    e = torch.exp(logits - logits.max(-1, keepdim=True).values.detach()).unsqueeze(-2)   # [...,1,P]
    v = donor_values.flatten(-3, -2)
    m = donor_mask.flatten(-3, -2)
    num = (e @ v).squeeze(-2)
    den = (e @ m).squeeze(-2)
    has = den > 0
    uniform = v.mean(-2)
    return torch.where(has, num / torch.where(has, den, torch.ones_like(den)), uniform)


def select_replaceable(sample: SubgraphSample) -> list:
    """Non-target rows whose window mask contains at least one missing entry."""
    tgt = set(np.asarray(sample.target_rows).tolist())
    return [i for i in range(sample.M.shape[0]) if i not in tgt and not np.all(sample.M[i] == 1)]


def inject_tensor(X, M, xhat, replace_rows):
    """``m*x + (1-m)*xhat`` on rows flagged in ``replace_rows [B,n]``; other rows untouched."""
    mixed = M * X + (1 - M) * xhat
    return torch.where(replace_rows.unsqueeze(-1), mixed, X)


def inject(sample: SubgraphSample, virtual: dict) -> SubgraphSample:
    X = sample.X.copy()
    for i, xh in virtual.items():
        m = sample.M[i]
        X[i] = np.where(m == 1, sample.X[i], np.asarray(xh))
    return replace(sample, X=X)


class Jigsaw(nn.Module):
    """Encoders plus the batched retrieve -> compose -> inject pipeline."""

    def __init__(self, t: int, T: int, d_e: int, d_p: int = 3, d_tau: int = 32, d_w: int = 32,
                 d_o: int = 32, d_n: int = 32, K_w: int = 5, K_n: int = 8, tau_w: float = 0.1,
                 tau_n: float = 0.1, exclude_overlap: bool = True):
        super().__init__()
        self.window_encoder = WindowEncoder(t, d_p, d_tau, d_w)
        self.node_encoder = NodeEncoder(T, d_e, d_o, d_n)
        self.t = t
        self.K_w, self.K_n, self.tau_w, self.tau_n = K_w, K_n, tau_w, tau_n
        self.exclusion_radius = t if exclude_overlap else 1

    def build_index(self, vt: ViewTensors) -> RetrievalIndex:
        return build_index(vt, self.window_encoder, self.node_encoder, K_w=self.K_w, K_n=self.K_n,
                           tau_w=self.tau_w, tau_n=self.tau_n, exclusion_radius=self.exclusion_radius)

    def forward(self, batch: Batch, vt: ViewTensors, index: RetrievalIndex, exclude_targets: bool = True):
        """Returns ``(X_J, xhat, replace_rows)``; ``xhat`` is defined on every row."""
        B, n, t = batch.X.shape
        obs_idx = vt.obs_pos[batch.node_ids]                       # [B, n]
        is_target = torch.zeros(B, n, dtype=torch.bool)
        is_target.scatter_(1, batch.target_rows, True)
        replace_rows = (obs_idx >= 0) & ~is_target & (batch.M < 1).any(-1)

        anchors = batch.window_start
        Q, _ = retrieve_windows(index, anchors)                     # [B, K_w]
        excl = torch.gather(obs_idx, 1, batch.target_rows) if exclude_targets else None
        J, _ = retrieve_nodes(index, obs_idx, excl)                 # [B, n, K_n]

        e_w = encode_windows(vt, self.window_encoder)
        e_n = encode_nodes(vt, self.node_encoder)
        s_w = (e_w[anchors].unsqueeze(1) * e_w[Q]).sum(-1)          # [B, K_w]
        s_n = (e_n[obs_idx.clamp(min=0)].unsqueeze(2) * e_n[J]).sum(-1)   # [B, n, K_n]
        s_w = s_w.unsqueeze(1).expand(B, n, -1)

        jj = J.unsqueeze(2)                                         # [B, n, 1, K_n]
        qq = Q.view(B, 1, -1, 1)                                    # [B, 1, K_w, 1]
        vals = vt.donor_values[jj, qq]                              # [B, n, K_w, K_n, t]
        msk = vt.donor_mask[jj, qq]
        xhat = compose_zero_filled(vals, msk, s_w, s_n, self.tau_w, self.tau_n)
        return inject_tensor(batch.X, batch.M, xhat, replace_rows), xhat, replace_rows


def compose_virtual(sample: SubgraphSample, jigsaw: Jigsaw, vt: ViewTensors, index: RetrievalIndex,
                    exclude_targets: bool = True) -> dict:
    """Virtual sequences ``{row: xhat}`` for the replaceable rows of one sample."""
    from .sampling import make_batch
    batch = make_batch([sample], dtype=vt.series.dtype)
    with torch.no_grad():
        _, xhat, rows = jigsaw(batch, vt, index, exclude_targets)
    return {int(i): xhat[0, i].numpy() for i in torch.nonzero(rows[0]).flatten()}


def dump_index(index: RetrievalIndex, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "window_emb.csv", index.window_embeddings.numpy(), delimiter=",", fmt="%.8g")
    with open(out / "node_emb.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        for nid, row in zip(index.node_ids, index.node_embeddings.numpy()):
            w.writerow([int(nid)] + [f"{v:.8g}" for v in row])


def load_index(out_dir, **kw) -> RetrievalIndex:
    out = Path(out_dir)
    e_w = torch.as_tensor(np.loadtxt(out / "window_emb.csv", delimiter=",", ndmin=2), dtype=torch.float32)
    raw = np.loadtxt(out / "node_emb.csv", delimiter=",", ndmin=2)
    retrievable = torch.ones(e_w.shape[0], dtype=torch.bool)
    return RetrievalIndex(e_w, torch.as_tensor(raw[:, 1:], dtype=torch.float32), retrievable,
                          raw[:, 0].astype(int), **kw)
