"""Sensor panels, adjacency, metadata encodings, missingness simulation and scaling."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

MINUTES_PER_DAY = 1440


class DataError(ValueError):
    pass


@dataclass
class TimeSeriesPanel:
    values: np.ndarray           # [N_total, T]
    base_mask: np.ndarray        # [N_total, T], 1 = genuinely present
    sample_period_minutes: int = 5
    sensor_ids: list = field(default_factory=list)
    start_offset_minutes: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.base_mask = np.asarray(self.base_mask, dtype=np.int8)
        if self.values.shape != self.base_mask.shape:
            raise DataError("values and base_mask shapes differ")
        if not np.isin(self.base_mask, (0, 1)).all():
            raise DataError("base_mask must be binary")
        if self.sample_period_minutes <= 0 or MINUTES_PER_DAY % self.sample_period_minutes:
            raise DataError(f"sample period {self.sample_period_minutes} does not divide 1440")
        if not self.sensor_ids:
            self.sensor_ids = [str(i) for i in range(self.values.shape[0])]
        if len(self.sensor_ids) != self.values.shape[0]:
            raise DataError("sensor_ids length does not match number of rows")
        # missing source entries are stored as 0 so downstream arithmetic stays finite
        self.values = np.where(self.base_mask == 1, np.nan_to_num(self.values), 0.0)

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    @property
    def steps_per_day(self) -> int:
        return MINUTES_PER_DAY // self.sample_period_minutes


@dataclass
class SensorMetadata:
    coords: np.ndarray
    coords_norm: np.ndarray
    attributes: Optional[np.ndarray] = None
    attribute_groups: Sequence[int] = ()

    @property
    def d_e(self) -> int:
        return self.features().shape[1]

    def features(self) -> np.ndarray:
        """Exogenous node features: normalized coordinates followed by one-hot attributes."""
        if self.attributes is None:
            return self.coords_norm
        return np.concatenate([self.coords_norm, self.attributes], axis=1)


def make_metadata(coords, attributes=None, attribute_groups: Sequence[int] = ()) -> SensorMetadata:
    coords = np.asarray(coords, dtype=float)
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    coords_norm = (coords - lo) / span
    if attributes is not None:
        attributes = np.asarray(attributes, dtype=float)
        groups = list(attribute_groups) or [attributes.shape[1]]
        if sum(groups) != attributes.shape[1]:
            raise DataError("attribute group sizes do not cover attribute columns")
        start = 0
        for g in groups:
            sums = attributes[:, start:start + g].sum(axis=1)
            if not np.all(sums == 1):
                raise DataError("each one-hot attribute group must sum to 1 per row")
            start += g
        attribute_groups = groups
    return SensorMetadata(coords, coords_norm, attributes, tuple(attribute_groups))


@dataclass
class AdjacencyMatrix:
    weights: np.ndarray
    sigma: float
    threshold: float

    def submatrix(self, node_ids) -> np.ndarray:
        idx = np.asarray(node_ids)
        return self.weights[np.ix_(idx, idx)]


def pairwise_distances(coords) -> np.ndarray:
    coords = np.asarray(coords, dtype=float)
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt((diff ** 2).sum(-1))


def build_adjacency(coords, threshold: float = 0.1, sigma: Optional[float] = None) -> AdjacencyMatrix:
    """Thresholded Gaussian kernel ``exp(-(d/sigma)^2)`` on Euclidean distances.

    ``sigma=None`` uses the standard deviation of all off-diagonal pairwise distances.
    """
    coords = np.asarray(coords, dtype=float)
    if coords.ndim != 2 or coords.shape[0] < 2:
        raise DataError("need at least two coordinate rows")
    if not 0 <= threshold < 1:
        raise DataError("threshold must lie in [0, 1)")
    dist = pairwise_distances(coords)
    off = dist[~np.eye(len(dist), dtype=bool)]
    if np.all(off == 0):
        raise DataError("zero distance variance")
    if sigma is None:
        sigma = float(off.std())
        if sigma == 0:
            raise DataError("zero distance variance")
    elif sigma <= 0:
        raise DataError("sigma must be positive")
    w = np.exp(-((dist / sigma) ** 2))
    w[w < threshold] = 0.0
    return AdjacencyMatrix(w, float(sigma), float(threshold))


def encode_time_features(T: int, sample_period_minutes: int = 5, start_offset_minutes: int = 0) -> np.ndarray:
    """Per-step daily phase descriptor ``(p, sin 2πp, cos 2πp)`` with ``p`` in [0, 1)."""
    if sample_period_minutes <= 0 or MINUTES_PER_DAY % sample_period_minutes:
        raise DataError(f"sample period {sample_period_minutes} does not divide 1440")
    minutes = (start_offset_minutes + np.arange(T) * sample_period_minutes) % MINUTES_PER_DAY
    phase = minutes / MINUTES_PER_DAY
    return np.stack([phase, np.sin(2 * np.pi * phase), np.cos(2 * np.pi * phase)], axis=1)


# --------------------------------------------------------------------------- missingness

PATTERNS = ("random", "block", "mixed")


@dataclass
class MissingnessSpec:
    pattern: str = "mixed"
    rate: float = 0.2
    block_len_range: tuple = (6, 12)
    block_spatial_hops: int = 1
    block_max_nodes: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise DataError(f"unknown missingness pattern {self.pattern!r}")
        if not 0 <= self.rate < 1:
            raise DataError("missing rate must lie in [0, 1)")
        lo, hi = self.block_len_range
        if not 1 <= lo <= hi:
            raise DataError("invalid block_len_range")


def _hop_neighbors(adj: np.ndarray, seed_node: int, hops: int, eligible_nodes: np.ndarray) -> list:
    """Nodes within ``hops`` of ``seed_node``, ranked by adjacency weight to the seed."""
    frontier = {seed_node}
    reached = {seed_node}
    for _ in range(hops):
        nxt = set()
        for v in frontier:
            nxt.update(np.flatnonzero(adj[v] > 0).tolist())
        nxt -= reached
        reached |= nxt
        frontier = nxt
    others = [v for v in reached if v != seed_node and eligible_nodes[v]]
    others.sort(key=lambda v: (-adj[seed_node, v], v))
    return [seed_node] + others


def _drop_blocks(mask, eligible, budget, spec, adj, rng) -> int:
    """Zero shared intervals on seed-node neighbourhoods until ``budget`` entries are gone.

    Intervals never touch an existing gap on the same node, so every run created here has
    a length inside ``block_len_range``. When that becomes impossible the constraint is
    relaxed so high rates remain reachable. The total exceeds ``budget`` by less than one
    interval length.
    """
    N, T = mask.shape
    lo, hi = spec.block_len_range
    elig_nodes = eligible.any(axis=1)
    seeds = np.flatnonzero(elig_nodes)
    dropped = 0
    strict_failures = 0
    while dropped < budget:
        strict = strict_failures < 2000
        s = int(rng.choice(seeds))
        length = int(rng.integers(lo, hi + 1))
        if length > T:
            length = T
        start = int(rng.integers(0, T - length + 1))
        group = _hop_neighbors(adj, s, spec.block_spatial_hops, elig_nodes)[: spec.block_max_nodes]
        stop = start + length
        gained = 0
        for v in group:
            if dropped + gained >= budget:
                break  # a final block covers only the nodes it needs, overshooting by < one run
            if strict:
                a, b = max(start - 1, 0), min(stop + 1, T)
                seg_elig = eligible[v, start:stop]
                # any earlier removal or source gap adjacent to the interval would merge runs
                if not seg_elig.all() or (mask[v, a:b] == 0).any():
                    continue
            cells = eligible[v, start:stop] & (mask[v, start:stop] == 1)
            gained += int(cells.sum())
            mask[v, start:stop][cells] = 0
        if gained == 0:
            strict_failures += 1
            if not strict and strict_failures > 200000:
                raise DataError("missingness budget unreachable")
        dropped += gained
    return dropped


def simulate_missingness(panel: TimeSeriesPanel, observed_ids, spec: MissingnessSpec,
                         adjacency: Optional[AdjacencyMatrix] = None) -> np.ndarray:
    """Return ``sim_mask <= base_mask`` with ``spec.rate`` of eligible entries removed.

    Eligible entries are present in the source data and belong to observed nodes.
    """
    if not 0 <= spec.rate < 1:
        raise DataError("missing rate must lie in [0, 1)")
    mask = panel.base_mask.astype(np.int8).copy()
    eligible = np.zeros_like(mask, dtype=bool)
    obs = np.asarray(sorted(observed_ids), dtype=int)
    eligible[obs] = panel.base_mask[obs] == 1
    n_elig = int(eligible.sum())
    budget = int(np.floor(spec.rate * n_elig + 0.5))
    if budget == 0:
        return mask
    if budget >= n_elig:
        raise DataError("missingness budget unreachable")
    rng = np.random.default_rng(spec.seed)

    if spec.pattern in ("block", "mixed"):
        if adjacency is None:
            raise DataError("block missingness needs an adjacency matrix")
        block_budget = budget if spec.pattern == "block" else budget // 2
        done = _drop_blocks(mask, eligible, block_budget, spec, adjacency.weights, rng)
        if spec.pattern == "block":
            return mask
        random_budget = budget - done
    else:
        random_budget = budget
    if random_budget > 0:
        cand = np.flatnonzero((eligible & (mask == 1)).ravel())
        if random_budget > cand.size:
            raise DataError("missingness budget unreachable")
        pick = rng.choice(cand, size=random_budget, replace=False)
        mask.ravel()[pick] = 0
    return mask


# --------------------------------------------------------------------------- splits and scaling

def split_nodes(n_nodes: int, unobserved_ratio: float, seed: int = 0):
    """Random holdout of ``round(ratio * n_nodes)`` unobserved nodes. Returns sorted id arrays."""
    if not 0 < unobserved_ratio < 1:
        raise DataError("unobserved_ratio must lie in (0, 1)")
    n_unobs = int(np.floor(unobserved_ratio * n_nodes + 0.5))
    if n_unobs == 0 or n_unobs == n_nodes:
        raise DataError(f"ratio {unobserved_ratio} leaves an empty node group for {n_nodes} nodes")
    perm = np.random.default_rng(seed).permutation(n_nodes)
    return np.sort(perm[n_unobs:]), np.sort(perm[:n_unobs])


@dataclass
class Scaler:
    mean: float
    std: float

    def transform(self, x):
        return (x - self.mean) / self.std

    def inverse(self, z):
        return z * self.std + self.mean


def fit_scaler(panel: TimeSeriesPanel, observed_ids, sim_mask) -> Scaler:
    obs = np.asarray(sorted(observed_ids), dtype=int)
    sel = sim_mask[obs] == 1
    vals = panel.values[obs][sel]
    if vals.size == 0:
        raise DataError("no available entries to fit the scaler")
    std = float(vals.std())
    if std == 0:
        raise DataError("zero variance in observed entries")
    return Scaler(float(vals.mean()), std)


def normalize_panel(panel: TimeSeriesPanel, observed_ids, sim_mask):
    """z-score with statistics from available observed entries; missing entries become 0.

    Returns ``(normalized values, scaler)``. The normalized matrix keeps every row, but only
    rows/entries where ``sim_mask`` is 1 carry information.
    """
    scaler = fit_scaler(panel, observed_ids, sim_mask)
    z = scaler.transform(panel.values)
    return np.where(sim_mask == 1, z, 0.0), scaler


# --------------------------------------------------------------------------- synthetic data

def synthetic_panel(n_nodes: int = 60, T: int = 2016, sample_period_minutes: int = 5,
                    seed: int = 0, noise_std: float = 1.0, event_std: float = 4.0,
                    base_missing_rate: float = 0.0, threshold: float = 0.1):
    """Traffic-like speeds: graph-smoothed daily rush-hour profiles, diffused transients, noise.

    Returns ``(panel, metadata, adjacency)``.
    """
    rng = np.random.default_rng(seed)
    coords = rng.uniform(0.0, 1.0, size=(n_nodes, 2))
    adj = build_adjacency(coords, threshold=threshold)
    deg = adj.weights.sum(1, keepdims=True)
    smooth = adj.weights / deg

    def field_(scale):
        f = rng.normal(size=n_nodes)
        for _ in range(2):
            f = smooth @ f
        f = (f - f.mean()) / (f.std() + 1e-12)
        return scale * f

    steps_day = MINUTES_PER_DAY // sample_period_minutes
    hours = (np.arange(T) % steps_day) * sample_period_minutes / 60.0
    day = np.arange(T) // steps_day
    n_days = int(day.max()) + 1

    base = 62.0 + field_(4.0)
    am_amp = np.clip(14.0 + field_(5.0), 2.0, None)
    pm_amp = np.clip(18.0 + field_(5.0), 2.0, None)
    am_shift = field_(0.5)
    pm_shift = field_(0.5)
    weekday = np.where(np.arange(n_days) % 7 < 5, 1.0, 0.35)
    day_scale = weekday * (1.0 + 0.08 * rng.normal(size=n_days))

    am = np.exp(-0.5 * ((hours[None, :] - 8.0 - am_shift[:, None]) / 1.2) ** 2)
    pm = np.exp(-0.5 * ((hours[None, :] - 17.5 - pm_shift[:, None]) / 1.5) ** 2)
    profile = base[:, None] - day_scale[day][None, :] * (am_amp[:, None] * am + pm_amp[:, None] * pm)

    # spatially diffused AR(1) transients (incidents, local congestion)
    events = np.zeros((n_nodes, T))
    e = np.zeros(n_nodes)
    rho = 0.97
    innov = np.sqrt(1 - rho ** 2)
    for k in range(T):
        xi = smooth @ (smooth @ rng.normal(size=n_nodes))
        e = rho * e + innov * xi
        events[:, k] = e
    events *= event_std / (events.std() + 1e-12)

    values = profile + events + noise_std * rng.normal(size=(n_nodes, T))
    base_mask = np.ones((n_nodes, T), dtype=np.int8)
    if base_missing_rate > 0:
        base_mask[rng.uniform(size=base_mask.shape) < base_missing_rate] = 0
    panel = TimeSeriesPanel(values, base_mask, sample_period_minutes,
                            [f"s{i:03d}" for i in range(n_nodes)])
    return panel, make_metadata(coords), adj


# --------------------------------------------------------------------------- CSV I/O

def _read_numeric_rows(path: Path, allow_blank: bool):
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                rows.append([float("nan") if (allow_blank and c.strip() == "") else float(c)
                             for c in row])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: malformed numeric field ({exc})") from None
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise DataError(f"{path}: ragged rows (widths {sorted(widths)})")
    return np.array(rows, dtype=float)


def read_series_csv(path, sample_period_minutes: int = 5) -> TimeSeriesPanel:
    """Wide matrix, one sensor per row; blank cells are missing source entries."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    arr = _read_numeric_rows(path, allow_blank=True)
    base = (~np.isnan(arr)).astype(np.int8)
    return TimeSeriesPanel(np.nan_to_num(arr), base, sample_period_minutes)


def read_meta_csv(path) -> tuple[list, SensorMetadata]:
    """Header ``sensor_id,x,y[,onehot...]``; one-hot columns form a single group per prefix."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["sensor_id", "x", "y"]:
            raise DataError(f"{path}:1: header must start with sensor_id,x,y")
        ids, coords, attrs = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                ids.append(row[0])
                coords.append([float(row[1]), float(row[2])])
                attrs.append([float(c) for c in row[3:]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: malformed numeric field ({exc})") from None
    extra = header[3:]
    if not extra:
        return ids, make_metadata(coords)
    prefixes = [h.split(".")[0] if "." in h else h.split("_")[0] for h in extra]
    groups, last = [], None
    for p in prefixes:
        if p == last:
            groups[-1] += 1
        else:
            groups.append(1)
        last = p
    return ids, make_metadata(coords, np.array(attrs), groups)


def read_matrix_csv(path, allow_blank: bool = False) -> np.ndarray:
    """Numeric matrix; with ``allow_blank`` empty cells read as NaN."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return _read_numeric_rows(path, allow_blank=allow_blank)


def write_matrix_csv(path, mat, fmt: str = "%.10g"):
    np.savetxt(path, np.asarray(mat), delimiter=",", fmt=fmt)
