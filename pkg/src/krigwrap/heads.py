"""Mask-conditioned affine modulation and dual-channel cross-attention fusion."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import gather_rows, random_walk_supports


class MaskEncoder(nn.Module):
    """One graph-convolution over ``[M ; X]`` node channels, gathered at the target rows.

    A target row carries no signal of its own, so its features come from the one-hop
    aggregation; the self term is kept for the general case.
    """

    def __init__(self, t: int, d_m: int = 32, hidden: int = 64):
        super().__init__()
        self.self_lin = nn.Linear(2 * t, hidden)
        self.nbr_lin = nn.Linear(2 * t, hidden, bias=False)
        self.head = nn.Linear(hidden, d_m)
        self.d_m = d_m

    def forward(self, M, X, A, target_rows):
        feats = torch.cat([M, X], dim=-1)
        P, _ = random_walk_supports(A)
        h = F.relu(self.self_lin(feats) + self.nbr_lin(P @ feats))
        return self.head(gather_rows(h, target_rows))


def encode_mask(encoder: MaskEncoder, M, X, A_sub, target_rows):
    return encoder(M, X, A_sub, target_rows)


class ModulationHead(nn.Module):
    def __init__(self, d_m: int, t: int, hidden: int = 64, gamma: float = 0.1):
        super().__init__()
        if gamma < 0:
            raise ValueError("gamma must be nonnegative")
        self.phi_alpha = nn.Sequential(nn.Linear(d_m, hidden), nn.ReLU(), nn.Linear(hidden, t))
        self.phi_beta = nn.Sequential(nn.Linear(d_m, hidden), nn.ReLU(), nn.Linear(hidden, t))
        self.gamma = gamma

    def affine(self, H, gamma=None):
        g = self.gamma if gamma is None else gamma
        alpha = 1 + g * torch.tanh(self.phi_alpha(H))
        beta = g * torch.tanh(self.phi_beta(H))
        return alpha, beta

    def forward(self, Z, H, gamma=None):
        return modulate(Z, H, self, gamma)


def modulate(Z, H, head: ModulationHead, gamma=None):
    """``alpha * Z + beta`` with ``alpha = 1 + g*tanh(.)``, ``beta = g*tanh(.)``."""
    g = head.gamma if gamma is None else gamma
    if g < 0:
        raise ValueError("gamma must be nonnegative")
    if g == 0:
        return Z
    alpha, beta = head.affine(H, g)
    return alpha * Z + beta


def attention(Q, K, V):
    """Single-head scaled dot product over the target-row axis. Returns ``(out, weights)``."""
    scores = Q @ K.transpose(-1, -2) / math.sqrt(Q.shape[-1])
    w = torch.softmax(scores, dim=-1)
    return w @ V, w


class FusionHead(nn.Module):
    def __init__(self, d_m: int, t: int, use_attention: bool = True):
        super().__init__()
        self.W_q = nn.Linear(d_m, d_m, bias=False)
        self.W_k = nn.Linear(d_m, d_m, bias=False)
        self.W_v = nn.Linear(t, t, bias=False)
        n_in = 4 * t if use_attention else 2 * t
        self.mlp = nn.Sequential(nn.Linear(n_in, 4 * t), nn.ReLU(), nn.Linear(4 * t, t))
        self.use_attention = use_attention

    def forward(self, Z, Z_J, Zt, Zt_J, H, H_J):
        return fuse(self, Z, Z_J, Zt, Zt_J, H, H_J)


def fuse(head: FusionHead, Z, Z_J, Zt, Zt_J, H, H_J, return_attention: bool = False):
    """Each branch queries the other, then an MLP maps ``[Ẑ‖Z̃‖Ẑ_J‖Z̃_J]`` to the estimate."""
    if Z.shape != Z_J.shape or Zt.shape != Zt_J.shape or H.shape != H_J.shape:
        raise ValueError("channel shape mismatch")
    if not head.use_attention:
        out = head.mlp(torch.cat([Zt, Zt_J], dim=-1))
        return (out, None) if return_attention else out
    Q, K, V = head.W_q(H), head.W_k(H), head.W_v(Z)
    Q_J, K_J, V_J = head.W_q(H_J), head.W_k(H_J), head.W_v(Z_J)
    Zh, w = attention(Q_J, K, V)
    Zh_J, w_J = attention(Q, K_J, V_J)
    out = head.mlp(torch.cat([Zh, Zt, Zh_J, Zt_J], dim=-1))
    return (out, (w, w_J)) if return_attention else out
