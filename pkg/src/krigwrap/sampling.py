"""Subgraph samples (X, A, M, Y) for training batches and the deterministic evaluation stream."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .data import AdjacencyMatrix, DataError, Scaler, TimeSeriesPanel, normalize_panel


@dataclass
class PanelView:
    """Everything a sampler needs: model inputs in normalized space plus the ground truth.

    ``values`` is zero wherever ``input_mask`` is 0, and ``input_mask`` is zero on every
    unobserved row, so nothing sampled from here can leak held-out signals into inputs.
    """
    values: np.ndarray        # [N, T] normalized, zero-filled
    input_mask: np.ndarray    # [N, T]
    truth: np.ndarray         # [N, T] normalized ground truth
    truth_mask: np.ndarray    # [N, T] source availability
    adjacency: np.ndarray     # [N, N]
    observed_ids: np.ndarray
    unobserved_ids: np.ndarray
    scaler: Scaler
    sample_period_minutes: int = 5
    start_offset_minutes: int = 0

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    @property
    def steps_per_day(self) -> int:
        return 1440 // self.sample_period_minutes


def make_view(panel: TimeSeriesPanel, adjacency: AdjacencyMatrix, sim_mask, observed_ids,
              unobserved_ids, scaler: Optional[Scaler] = None) -> PanelView:
    observed_ids = np.asarray(sorted(observed_ids), dtype=int)
    unobserved_ids = np.asarray(sorted(unobserved_ids), dtype=int)
    if scaler is None:
        _, scaler = normalize_panel(panel, observed_ids, sim_mask)
    input_mask = np.zeros_like(sim_mask, dtype=np.int8)
    input_mask[observed_ids] = sim_mask[observed_ids] & panel.base_mask[observed_ids]
    truth = np.where(panel.base_mask == 1, scaler.transform(panel.values), 0.0)
    values = np.where(input_mask == 1, truth, 0.0)
    return PanelView(values, input_mask, truth, panel.base_mask.astype(np.int8), adjacency.weights,
                     observed_ids, unobserved_ids, scaler, panel.sample_period_minutes,
                     panel.start_offset_minutes)


@dataclass
class SubgraphSample:
    node_ids: np.ndarray      # [n+u]
    X: np.ndarray             # [n+u, t]
    A_sub: np.ndarray         # [n+u, n+u]
    M: np.ndarray             # [n+u, t]
    target_rows: np.ndarray   # [u]
    Y: np.ndarray             # [u, t]
    Y_mask: np.ndarray        # [u, t] ground-truth availability
    window_start: int


def _build(view: PanelView, node_ids, target_rows, start, t) -> SubgraphSample:
    node_ids = np.asarray(node_ids, dtype=int)
    target_rows = np.asarray(target_rows, dtype=int)
    sl = slice(start, start + t)
    X = view.values[node_ids, sl].copy()
    M = view.input_mask[node_ids, sl].copy()
    X[target_rows] = 0.0
    M[target_rows] = 0
    tgt = node_ids[target_rows]
    return SubgraphSample(
        node_ids=node_ids, X=X, A_sub=view.adjacency[np.ix_(node_ids, node_ids)].copy(), M=M,
        target_rows=target_rows, Y=view.truth[tgt, sl].copy(), Y_mask=view.truth_mask[tgt, sl].copy(),
        window_start=int(start))


NODE_SAMPLING = ("uniform", "connected")


def grow_connected(adjacency: np.ndarray, pool: np.ndarray, k: int, rng: np.random.Generator,
                   start: Optional[int] = None) -> np.ndarray:
    """``k`` pool nodes reached by breadth-first growth over nonzero edges (random order per layer).

    Growth starts at ``start`` (not itself returned) or at a random pool node; when the
    component is exhausted the remainder is drawn uniformly from unreached pool nodes.
    """
    in_pool = np.zeros(adjacency.shape[0], dtype=bool)
    in_pool[pool] = True
    chosen: list = []
    seen = np.zeros_like(in_pool)
    if start is None:
        start = int(rng.choice(pool))
        chosen.append(start)
    seen[start] = True
    frontier = [start]
    while len(chosen) < k:
        if not frontier:
            rest = np.flatnonzero(in_pool & ~seen)
            nxt = int(rng.choice(rest))
            seen[nxt] = True
            chosen.append(nxt)
            frontier = [nxt]
            continue
        layer = []
        for v in frontier:
            nb = np.flatnonzero((adjacency[v] > 0) & in_pool & ~seen)
            seen[nb] = True
            layer.extend(nb.tolist())
        layer = [int(x) for x in rng.permutation(np.asarray(layer, dtype=int))]
        chosen.extend(layer[: k - len(chosen)])
        frontier = layer
    return np.asarray(chosen[:k], dtype=int)


def sample_subgraph(view: PanelView, n_plus_u: int, u: int, t: int, mode: str,
                    rng: np.random.Generator, target: Optional[int] = None,
                    window_start: Optional[int] = None, node_sampling: str = "uniform") -> SubgraphSample:
    """Draw one subgraph sample.

    ``train``: nodes and pseudo-unobserved targets both come from observed nodes, window start
    uniform. ``eval``: ``target`` (a true unobserved node, or any node for validation) sits in the
    last row among ``n_plus_u - 1`` observed nodes; ``window_start`` is supplied by the stream.
    ``node_sampling="connected"`` grows the node set over graph edges instead of drawing it
    uniformly.
    """
    if node_sampling not in NODE_SAMPLING:
        raise ValueError(f"unknown node sampling {node_sampling!r}")
    T = view.n_steps
    if t > T:
        raise DataError(f"window length {t} exceeds horizon {T}")
    obs = view.observed_ids
    if mode == "train":
        if n_plus_u > obs.size:
            raise DataError(f"subgraph size {n_plus_u} exceeds {obs.size} observed nodes")
        if node_sampling == "uniform":
            nodes = rng.choice(obs, size=n_plus_u, replace=False)
        else:
            nodes = rng.permutation(grow_connected(view.adjacency, obs, n_plus_u, rng))
        start = int(rng.integers(0, T - t + 1)) if window_start is None else window_start
        return _build(view, nodes, np.arange(n_plus_u - u, n_plus_u), start, t)
    if mode != "eval":
        raise ValueError(f"unknown sampling mode {mode!r}")
    if target is None or window_start is None:
        raise ValueError("eval mode needs target and window_start")
    pool = obs[obs != target]
    if n_plus_u - 1 > pool.size:
        raise DataError(f"subgraph size {n_plus_u} exceeds available nodes")
    if node_sampling == "uniform":
        others = rng.choice(pool, size=n_plus_u - 1, replace=False)
    else:
        others = rng.permutation(grow_connected(view.adjacency, pool, n_plus_u - 1, rng, start=target))
    return _build(view, np.append(others, target), [n_plus_u - 1], window_start, t)


def eval_stream(view: PanelView, targets, n_plus_u: int, t: int, seed: int = 0,
                node_sampling: str = "uniform"):
    """Non-overlapping stride-``t`` windows for each target node, deterministic given ``seed``."""
    rng = np.random.default_rng(seed)
    starts = range(0, view.n_steps - t + 1, t)
    return [sample_subgraph(view, n_plus_u, 1, t, "eval", rng, target=int(v), window_start=s,
                            node_sampling=node_sampling)
            for v in targets for s in starts]


@dataclass
class Batch:
    X: torch.Tensor
    A: torch.Tensor
    M: torch.Tensor
    Y: torch.Tensor
    Y_mask: torch.Tensor
    target_rows: torch.Tensor
    node_ids: torch.Tensor
    window_start: torch.Tensor

    def __len__(self):
        return self.X.shape[0]

    def to(self, dtype):
        return Batch(self.X.to(dtype), self.A.to(dtype), self.M.to(dtype), self.Y.to(dtype),
                     self.Y_mask.to(dtype), self.target_rows, self.node_ids, self.window_start)


def make_batch(samples, dtype=torch.float32) -> Batch:
    if not samples:
        raise ValueError("empty sample list")
    shape = (samples[0].X.shape, samples[0].Y.shape)
    for s in samples:
        if (s.X.shape, s.Y.shape) != shape:
            raise ValueError("heterogeneous sample shapes in batch")

    def stack(attr, dt):
        return torch.as_tensor(np.stack([getattr(s, attr) for s in samples]), dtype=dt)

    return Batch(
        X=stack("X", dtype), A=stack("A_sub", dtype), M=stack("M", dtype), Y=stack("Y", dtype),
        Y_mask=stack("Y_mask", dtype), target_rows=stack("target_rows", torch.long),
        node_ids=stack("node_ids", torch.long),
        window_start=torch.as_tensor([s.window_start for s in samples], dtype=torch.long))


def unbatch(batch: Batch) -> list:
    out = []
    for b in range(len(batch)):
        out.append(SubgraphSample(
            node_ids=batch.node_ids[b].numpy(), X=batch.X[b].numpy(), A_sub=batch.A[b].numpy(),
            M=batch.M[b].numpy(), target_rows=batch.target_rows[b].numpy(), Y=batch.Y[b].numpy(),
            Y_mask=batch.Y_mask[b].numpy(), window_start=int(batch.window_start[b])))
    return out
