"""Losses, optimizer schedule and the end-to-end training loop."""
from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .jigsaw import view_tensors
from .model import ModelContext, WrapperModel
from .sampling import NODE_SAMPLING, PanelView, eval_stream, make_batch, sample_subgraph

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LossReport:
    l1: float
    l2: float
    total: float
    lam: float
    D: int


def loss_primary(Y_hat, Y, mask):
    """Masked MAE: mean over valid entries of each sample, then mean over samples."""
    err = (Y_hat - Y).abs() * mask
    cnt = mask.flatten(1).sum(1)
    valid = cnt > 0
    if not bool(valid.any()):
        raise ValueError("no valid target entries in batch")
    per_sample = err.flatten(1).sum(1)[valid] / cnt[valid]
    return per_sample.mean()


def loss_auxiliary(xhat, x, m, rows=None):
    """Masked L1 reconstruction of the virtual sequences on available positions.

    ``rows [B,n]`` selects the replaceable rows; ``D`` counts available entries there.
    Returns ``(l2, D)`` with ``l2 = 0`` when ``D = 0``.
    """
    if rows is not None:
        m = m * rows.unsqueeze(-1).to(m.dtype)
    D = m.sum()
    num = ((xhat - x).abs() * m).sum()
    if float(D) == 0:
        return num * 0.0, 0
    return num / D, int(D.item())


def combine_losses(l1, l2, lam: float):
    return l1 + lam * l2


def lr_at(epoch: int, lr: float = 1e-3, decay: float = 0.5, every: int = 20) -> float:
    return lr * decay ** (epoch // every)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_decay: float = 0.5
    decay_every: int = 20
    batch_size: int = 128
    patience: int = 20
    max_epochs: int = 200
    batches_per_epoch: int = 20
    lam: float = 1.0
    seed: int = 0
    subgraph_size: int = 40
    t: int = 24
    u: int = 1
    index_refresh: str = "epoch"     # or "batch"
    node_sampling: str = "uniform"   # or "connected"
    val_max_samples: int = 512
    deterministic: bool = True

    def __post_init__(self):
        for name in ("lr", "batch_size", "patience", "max_epochs", "batches_per_epoch", "t", "u"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience exceeds max_epochs")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.index_refresh not in ("epoch", "batch"):
            raise ValueError("index_refresh must be 'epoch' or 'batch'")
        if self.node_sampling not in NODE_SAMPLING:
            raise ValueError(f"node_sampling must be one of {NODE_SAMPLING}")


@dataclass
class TrainData:
    train: PanelView
    val: PanelView
    node_features: np.ndarray
    val_targets: Optional[np.ndarray] = None


@dataclass
class TrainResult:
    best_state: dict
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = float("inf")


def _uses_jigsaw(model) -> bool:
    return isinstance(model, WrapperModel) and model.jigsaw is not None


def model_dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype


def make_context(model, view: PanelView, node_features, t: int, exclude_targets: bool) -> ModelContext:
    if not _uses_jigsaw(model):
        return ModelContext(exclude_targets=exclude_targets)
    vt = view_tensors(view, node_features, t, dtype=model_dtype(model))
    return ModelContext(vt=vt, index=model.build_index(vt), exclude_targets=exclude_targets)


def predict(model, samples, ctx: ModelContext, batch_size: int = 256) -> np.ndarray:
    """Stacked normalized estimates ``[S, u, t]`` in sample order."""
    model.eval()
    outs = []
    with torch.no_grad():
        for k in range(0, len(samples), batch_size):
            batch = make_batch(samples[k:k + batch_size], dtype=model_dtype(model))
            outs.append(model(batch, ctx)["Y_hat"].numpy())
    return np.concatenate(outs)


def _masked_mae(Y_hat, samples) -> float:
    Y = np.stack([s.Y for s in samples])
    m = np.stack([s.Y_mask for s in samples])
    return float((np.abs(Y_hat - Y) * m).sum() / max(m.sum(), 1))


def validation_stream(data: TrainData, cfg: TrainConfig):
    view = data.val
    targets = data.val_targets if data.val_targets is not None else view.observed_ids
    size = min(cfg.subgraph_size, view.observed_ids.size)
    stream = eval_stream(view, targets, size, cfg.t, seed=cfg.seed + 7, node_sampling=cfg.node_sampling)
    if len(stream) > cfg.val_max_samples:
        pick = np.random.default_rng(cfg.seed + 11).choice(len(stream), cfg.val_max_samples, replace=False)
        stream = [stream[i] for i in sorted(pick)]
    return stream


def train(model, data: TrainData, cfg: TrainConfig, log_every: int = 0) -> TrainResult:
    """Adam with step-decayed learning rate; keeps the parameters with the lowest validation L1."""
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.decay_every, gamma=cfg.lr_decay)
    dtype = model_dtype(model)
    size = min(cfg.subgraph_size, data.train.observed_ids.size)
    use_aux = _uses_jigsaw(model) and model.variant.use_aux_loss
    val_samples = validation_stream(data, cfg)

    train_vt = view_tensors(data.train, data.node_features, cfg.t, dtype) if _uses_jigsaw(model) else None
    val_ctx = None
    result = TrainResult(best_state=copy.deepcopy(model.state_dict()))
    stale = 0
    for epoch in range(cfg.max_epochs):
        lr_now = opt.param_groups[0]["lr"]
        model.train()
        ctx = ModelContext(vt=train_vt, exclude_targets=True)
        l1_sum = l2_sum = 0.0
        for step in range(cfg.batches_per_epoch):
            if train_vt is not None and (step == 0 or cfg.index_refresh == "batch"):
                ctx.index = model.build_index(train_vt)
            samples = [sample_subgraph(data.train, size, cfg.u, cfg.t, "train", rng,
                                       node_sampling=cfg.node_sampling)
                       for _ in range(cfg.batch_size)]
            batch = make_batch(samples, dtype=dtype)
            out = model(batch, ctx)
            l1 = loss_primary(out["Y_hat"], batch.Y, batch.Y_mask)
            if "xhat" in out:
                l2, _ = loss_auxiliary(out["xhat"], batch.X, batch.M, out["replace_rows"])
            else:
                l2 = l1.new_zeros(())
            total = combine_losses(l1, l2, cfg.lam) if use_aux else l1
            if not torch.isfinite(total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}: "
                                       f"l1={float(l1.detach())} l2={float(l2.detach())}")
            opt.zero_grad()
            total.backward()
            opt.step()
            l1_sum += float(l1.detach())
            l2_sum += float(l2.detach())
        sched.step()

        if val_ctx is None or _uses_jigsaw(model):
            val_ctx = make_context(model, data.val, data.node_features, cfg.t, exclude_targets=True)
        val_l1 = _masked_mae(predict(model, val_samples, val_ctx), val_samples)
        row = {"epoch": epoch, "lr": lr_now, "train_l1": l1_sum / cfg.batches_per_epoch,
               "train_l2": l2_sum / cfg.batches_per_epoch, "val_l1": val_l1}
        result.history.append(row)
        if log_every and epoch % log_every == 0:
            log.info("epoch %d lr %.2e train_l1 %.4f train_l2 %.4f val_l1 %.4f", epoch, lr_now,
                     row["train_l1"], row["train_l2"], val_l1)
        if val_l1 < result.best_val:
            result.best_val, result.best_epoch = val_l1, epoch
            result.best_state = copy.deepcopy(model.state_dict())
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.load_state_dict(result.best_state)
    return result


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "lr", "train_l1", "train_l2", "val_l1"])
        w.writeheader()
        for row in history:
            w.writerow(row)


def read_history(path) -> list:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def save_checkpoint(model, path):
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    np.savez(Path(path), **arrays)


def load_checkpoint(model, path):
    with np.load(Path(path)) as z:
        state = {k: torch.as_tensor(z[k]) for k in z.files}
    model.load_state_dict(state)
    return model
