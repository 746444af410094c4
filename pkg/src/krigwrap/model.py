"""Vanilla backbone model and the dual-channel wrapper around it."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .backbone import DiffusionBackbone, gather_rows
from .heads import FusionHead, MaskEncoder, ModulationHead, fuse, modulate
from .jigsaw import Jigsaw, RetrievalIndex, ViewTensors
from .sampling import Batch


@dataclass(frozen=True)
class Variant:
    wrapped: bool = True
    use_jigsaw: bool = True
    use_mask: bool = True
    use_attention: bool = True
    use_aux_loss: bool = True


VARIANTS = {
    "full": Variant(),
    "wo_J": Variant(use_jigsaw=False),
    "wo_M": Variant(use_mask=False),
    "wo_A": Variant(use_attention=False),
    "wo_L": Variant(use_aux_loss=False),
    "wo_JM": Variant(wrapped=False, use_jigsaw=False, use_mask=False),
    "vanilla": Variant(wrapped=False, use_jigsaw=False, use_mask=False),
}


@dataclass
class ModelContext:
    vt: Optional[ViewTensors] = None
    index: Optional[RetrievalIndex] = None
    exclude_targets: bool = True


class VanillaModel(nn.Module):
    def __init__(self, backbone: nn.Module):
        super().__init__()
        self.backbone = backbone
        self.variant = VARIANTS["vanilla"]

    def forward(self, batch: Batch, ctx: Optional[ModelContext] = None) -> dict:
        Z = gather_rows(self.backbone(batch.X, batch.A, batch.M), batch.target_rows)
        return {"Y_hat": Z}


class WrapperModel(nn.Module):
    """Shared backbone applied to the raw and jigsaw-augmented inputs, mask-modulated and fused.

    Both channels go through the very same ``backbone``, ``mask_encoder`` and ``modulation``
    modules.
    """

    def __init__(self, backbone: nn.Module, t: int, T: int, d_e: int, variant: Variant = Variant(),
                 d_m: int = 32, gamma: float = 0.1, jigsaw_kw: Optional[dict] = None):
        super().__init__()
        self.backbone = backbone
        self.variant = variant
        self.jigsaw = Jigsaw(t, T, d_e, **(jigsaw_kw or {})) if variant.use_jigsaw else None
        self.mask_encoder = MaskEncoder(t, d_m) if variant.use_mask else None
        self.modulation = ModulationHead(d_m, t, gamma=gamma) if variant.use_mask else None
        self.fusion = FusionHead(d_m, t, use_attention=variant.use_attention)
        self.d_m = d_m

    def build_index(self, vt: ViewTensors) -> Optional[RetrievalIndex]:
        return self.jigsaw.build_index(vt) if self.jigsaw is not None else None

    def forward(self, batch: Batch, ctx: Optional[ModelContext] = None) -> dict:
        out = {}
        X, M, A = batch.X, batch.M, batch.A
        if self.jigsaw is not None:
            X_J, xhat, rows = self.jigsaw(batch, ctx.vt, ctx.index, ctx.exclude_targets)
            out.update(xhat=xhat, replace_rows=rows)
        else:
            X_J = X
        # one backbone call over both channels keeps parameters literally shared
        Z_both = self.backbone(torch.cat([X, X_J]), torch.cat([A, A]), torch.cat([M, M]))
        B = X.shape[0]
        Z = gather_rows(Z_both[:B], batch.target_rows)
        Z_J = gather_rows(Z_both[B:], batch.target_rows)
        if self.mask_encoder is not None:
            H_both = self.mask_encoder(torch.cat([M, M]), torch.cat([X, X_J]), torch.cat([A, A]),
                                       torch.cat([batch.target_rows, batch.target_rows]))
            H, H_J = H_both[:B], H_both[B:]
            Zt, Zt_J = modulate(Z, H, self.modulation), modulate(Z_J, H_J, self.modulation)
        else:
            H = H_J = Z.new_zeros(*Z.shape[:-1], self.d_m)
            Zt, Zt_J = Z, Z_J
        out["Y_hat"] = fuse(self.fusion, Z, Z_J, Zt, Zt_J, H, H_J)
        out.update(Z=Z, Z_J=Z_J)
        return out


def build_model(variant_name: str, t: int, T: int, d_e: int, hidden: int = 64, order: int = 2,
                n_layers: int = 3, d_m: int = 32, gamma: float = 0.1, jigsaw_kw: Optional[dict] = None):
    variant = VARIANTS[variant_name]
    backbone = DiffusionBackbone(t, hidden, order, n_layers)
    if not variant.wrapped:
        return VanillaModel(backbone)
    return WrapperModel(backbone, t, T, d_e, variant, d_m, gamma, jigsaw_kw)
