"""Pluggable kriging backbones. The reference model stacks diffusion graph convolutions over
time-as-feature node signals, in the style of inductive GNN kriging."""
from __future__ import annotations

from typing import Protocol

import torch
import torch.nn as nn
import torch.nn.functional as F


class KrigingBackbone(Protocol):
    """``forward(X [B,N,t], A [B,N,N], M [B,N,t]) -> Z_full [B,N,t]``.

    Implementations must be permutation equivariant over the node axis and must not
    depend on anything besides their parameters and inputs.
    """

    def forward(self, X: torch.Tensor, A: torch.Tensor, M: torch.Tensor) -> torch.Tensor: ...

    def parameters(self): ...


def random_walk_supports(A: torch.Tensor):
    """Forward and backward random-walk transition matrices of a batch of adjacencies.

    Rows with zero degree get a self-loop so the normalization stays finite.
    """
    eye = torch.eye(A.shape[-1], dtype=A.dtype, device=A.device)
    fwd_deg = A.sum(-1, keepdim=True)
    A_f = torch.where(fwd_deg > 0, A, A + eye)
    At = A.transpose(-1, -2)
    bwd_deg = At.sum(-1, keepdim=True)
    A_b = torch.where(bwd_deg > 0, At, At + eye)
    return A_f / A_f.sum(-1, keepdim=True), A_b / A_b.sum(-1, keepdim=True)


class DiffusionGraphConv(nn.Module):
    """Chebyshev-style diffusion convolution with ``order`` hops per support."""

    def __init__(self, in_dim: int, out_dim: int, order: int = 2, n_supports: int = 2):
        super().__init__()
        self.order = order
        self.n_terms = 1 + order * n_supports
        self.weight = nn.Parameter(torch.empty(in_dim * self.n_terms, out_dim))
        self.bias = nn.Parameter(torch.zeros(out_dim))
        nn.init.xavier_normal_(self.weight, gain=1.0)

    def forward(self, x, supports):
        terms = [x]
        if self.order > 0:
            for P in supports:
                x0 = x
                x1 = P @ x0
                terms.append(x1)
                for _ in range(2, self.order + 1):
                    x2 = 2 * (P @ x1) - x0
                    terms.append(x2)
                    x0, x1 = x1, x2
        return torch.cat(terms, dim=-1) @ self.weight + self.bias


class DiffusionBackbone(nn.Module):
    """Three diffusion-convolution blocks: ``t -> hidden -> hidden -> t`` with ReLU in between."""

    def __init__(self, t: int, hidden: int = 64, order: int = 2, n_layers: int = 3):
        super().__init__()
        dims = [t] + [hidden] * (n_layers - 1) + [t]
        self.layers = nn.ModuleList(DiffusionGraphConv(a, b, order) for a, b in zip(dims[:-1], dims[1:]))
        self.t = t

    def forward(self, X, A, M=None):
        if not torch.isfinite(X).all():
            raise ValueError("non-finite backbone input")
        supports = random_walk_supports(A)
        h = X
        for k, layer in enumerate(self.layers):
            h = layer(h, supports)
            if k < len(self.layers) - 1:
                h = F.relu(h)
        return h


def gather_rows(Z_full: torch.Tensor, rows: torch.Tensor) -> torch.Tensor:
    """Select ``rows [B,u]`` from ``Z_full [B,N,t]``."""
    idx = rows.unsqueeze(-1).expand(-1, -1, Z_full.shape[-1])
    return torch.gather(Z_full, 1, idx)


def layer_receptive_hops(model: DiffusionBackbone) -> int:
    return sum(layer.order for layer in model.layers)

