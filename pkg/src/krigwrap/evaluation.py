"""Experiment protocols (comparison, ablation, robustness sweeps), result tables, and the
time-of-day statistics of retrieved donor windows."""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .config import ExperimentConfig
from .jigsaw import RetrievalIndex, retrieve_nodes, retrieve_windows
from .pipeline import Dataset, RunOutput, run_single

RESULT_FIELDS = ["pattern", "rate", "variant", "seed", "mae", "rmse", "mape"]
ABLATION_VARIANTS = ("full", "wo_J", "wo_M", "wo_A", "wo_L", "wo_JM")
ARMS = ("vanilla", "full")


class ProtocolError(ValueError):
    pass


# --------------------------------------------------------------------------- grid

@dataclass(frozen=True)
class Cell:
    pattern: str
    rate: float
    variant: str
    seed: int
    unobserved_ratio: float = 0.2


@dataclass
class ExperimentGrid:
    patterns: tuple = ("mixed",)
    missing_rates: tuple = (0.2,)
    unobserved_ratios: tuple = (0.2,)
    variants: tuple = ARMS
    seeds: tuple = (0, 1, 2)

    def cells(self) -> list:
        """Deterministic cross product; seeds vary slowest so partial grids stay balanced."""
        return [Cell(p, float(r), v, int(s), float(u))
                for s, p, r, u, v in itertools.product(self.seeds, self.patterns, self.missing_rates,
                                                       self.unobserved_ratios, self.variants)]


@dataclass
class ResultRow:
    pattern: str
    rate: float
    variant: str
    seed: int
    mae: float
    rmse: float
    mape: Optional[float]
    unobserved_ratio: float = 0.2

    @property
    def cell(self) -> Cell:
        return Cell(self.pattern, self.rate, self.variant, self.seed, self.unobserved_ratio)

    @classmethod
    def from_run(cls, out: RunOutput) -> "ResultRow":
        r = out.report
        return cls(out.pattern, out.rate, out.variant, out.seed, r.mae, r.rmse, r.mape, out.unobserved_ratio)


Runner = Callable[[Cell], RunOutput]


def default_runner(ds: Dataset, cfg: ExperimentConfig) -> Runner:
    def run(cell: Cell) -> RunOutput:
        return run_single(ds, cfg, cell.variant, cell.pattern, cell.rate, cell.seed, cell.unobserved_ratio)
    return run


def run_cells(cells, runner: Runner, done: Optional[dict] = None, on_row=None) -> list:
    """Run every cell not already in ``done`` (a ``Cell -> ResultRow`` map); returns rows in cell order."""
    done = {} if done is None else done
    rows = []
    for cell in cells:
        if cell not in done:
            row = ResultRow.from_run(runner(cell))
            done[cell] = row
            if on_row is not None:
                on_row(row)
        rows.append(done[cell])
    return rows


def write_results(rows, path, ratio_column: bool = False):
    """``results.csv`` layout; ``ratio_column`` replaces ``rate`` by the unobserved ratio."""
    fields = list(RESULT_FIELDS)
    if ratio_column:
        fields[1] = "unobserved_ratio"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow(_row_dict(r, ratio_column))


def _row_dict(r: ResultRow, ratio_column: bool = False) -> dict:
    d = {"pattern": r.pattern, "rate": r.rate, "variant": r.variant, "seed": r.seed,
         "mae": repr(r.mae), "rmse": repr(r.rmse), "mape": "" if r.mape is None else repr(r.mape)}
    if ratio_column:
        d.pop("rate")
        d["unobserved_ratio"] = r.unobserved_ratio
    return d


def read_results(path, default_ratio: float = 0.2) -> list:
    rows = []
    with open(path, newline="") as fh:
        for d in csv.DictReader(fh):
            ratio = float(d["unobserved_ratio"]) if "unobserved_ratio" in d else default_ratio
            rate = float(d["rate"]) if "rate" in d else float("nan")
            rows.append(ResultRow(d["pattern"], rate, d["variant"], int(d["seed"]), float(d["mae"]),
                                  float(d["rmse"]), float(d["mape"]) if d["mape"] else None, ratio))
    return rows


# --------------------------------------------------------------------------- summaries

@dataclass
class Summary:
    mean: float
    std: float
    se: float
    n: int


def summarize(values) -> Summary:
    v = np.asarray(list(values), dtype=float)
    if v.size == 0:
        raise ValueError("nothing to summarize")
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return Summary(float(v.mean()), std, std / np.sqrt(v.size), int(v.size))


def group_mae(rows, keys=("pattern", "rate", "variant", "unobserved_ratio")) -> dict:
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(getattr(r, k) for k in keys), []).append(r.mae)
    return {k: summarize(v) for k, v in groups.items()}


def _check_paired(rows, arms):
    """Every (pattern, rate, ratio, seed) must be present for every arm."""
    by: dict = {}
    for r in rows:
        by.setdefault((r.pattern, r.rate, r.unobserved_ratio, r.seed), set()).add(r.variant)
    for key, have in by.items():
        missing = set(arms) - have
        if missing:
            raise ProtocolError(f"arms {sorted(missing)} missing for protocol cell {key}")


def relative_gain(base: float, new: float) -> float:
    """Percent error reduction of ``new`` relative to ``base``."""
    return 100.0 * (base - new) / base


# --------------------------------------------------------------------------- protocols

@dataclass
class ComparisonTable:
    rows: list
    per_pattern: dict = field(default_factory=dict)   # pattern -> {arm: Summary, "gain": float}


def run_comparison(cfg: ExperimentConfig, runner: Runner, patterns=None, seeds=None,
                   rate: Optional[float] = None, done=None, on_row=None) -> ComparisonTable:
    patterns = tuple(patterns or cfg.grid.patterns)
    seeds = tuple(cfg.grid.seeds if seeds is None else seeds)
    rate = cfg.missing.rate if rate is None else rate
    arms = ARMS + tuple(f"vanilla+{m}" for m in cfg.eval.preimpute)
    grid = ExperimentGrid(patterns, (rate,), (cfg.data.unobserved_ratio,), arms, seeds)
    rows = run_cells(grid.cells(), runner, done, on_row)
    _check_paired(rows, arms)
    table = ComparisonTable(rows)
    stats = group_mae(rows, ("pattern", "variant"))
    for p in patterns:
        entry = {a: stats[(p, a)] for a in arms}
        entry["gain"] = relative_gain(entry["vanilla"].mean, entry["full"].mean)
        table.per_pattern[p] = entry
    return table


@dataclass
class AblationTable:
    rows: list
    summary: dict = field(default_factory=dict)        # variant -> Summary
    degradation: dict = field(default_factory=dict)    # variant -> % MAE increase over full


def run_ablation(cfg: ExperimentConfig, runner: Runner, seeds=None, pattern=None, rate=None,
                 done=None, on_row=None) -> AblationTable:
    seeds = tuple(cfg.grid.seeds if seeds is None else seeds)
    pattern = cfg.missing.pattern if pattern is None else pattern
    rate = cfg.missing.rate if rate is None else rate
    grid = ExperimentGrid((pattern,), (rate,), (cfg.data.unobserved_ratio,), ABLATION_VARIANTS, seeds)
    rows = run_cells(grid.cells(), runner, done, on_row)
    _check_paired(rows, ABLATION_VARIANTS)
    stats = group_mae(rows, ("variant",))
    summary = {v: stats[(v,)] for v in ABLATION_VARIANTS}
    full = summary["full"].mean
    return AblationTable(rows, summary, {v: -relative_gain(full, s.mean) for v, s in summary.items()})


@dataclass
class RobustnessTable:
    rows: list
    rate_curves: dict = field(default_factory=dict)     # arm -> [(rate, Summary)]
    ratio_curves: dict = field(default_factory=dict)    # arm -> [(ratio, Summary)]
    ratio_rows: list = field(default_factory=list)

    def monotone(self, arm: str, which: str = "rate") -> bool:
        curve = (self.rate_curves if which == "rate" else self.ratio_curves)[arm]
        means = [s.mean for _, s in curve]
        return all(b >= a for a, b in zip(means, means[1:])) and means[-1] > means[0]

    def wrapped_dominates(self, which: str = "rate") -> bool:
        curves = self.rate_curves if which == "rate" else self.ratio_curves
        return all(f.mean <= v.mean for (_, f), (_, v) in zip(curves["full"], curves["vanilla"]))


def run_robustness(cfg: ExperimentConfig, runner: Runner, rates=None, ratios=None, seeds=None,
                   pattern=None, done=None, on_row=None) -> RobustnessTable:
    seeds = tuple(cfg.grid.seeds if seeds is None else seeds)
    pattern = cfg.missing.pattern if pattern is None else pattern
    rates = tuple(cfg.grid.rates if rates is None else rates)
    ratios = tuple(cfg.grid.unobserved_ratios if ratios is None else ratios)
    base_ratio = cfg.data.unobserved_ratio
    rows = run_cells(ExperimentGrid((pattern,), rates, (base_ratio,), ARMS, seeds).cells(), runner, done, on_row)
    _check_paired(rows, ARMS)
    table = RobustnessTable(rows)
    stats = group_mae(rows, ("rate", "variant"))
    table.rate_curves = {a: [(float(r), stats[(float(r), a)]) for r in rates] for a in ARMS}
    if ratios:
        grid = ExperimentGrid((pattern,), (cfg.missing.rate,), ratios, ARMS, seeds)
        table.ratio_rows = run_cells(grid.cells(), runner, done, on_row)
        _check_paired(table.ratio_rows, ARMS)
        stats = group_mae(table.ratio_rows, ("unobserved_ratio", "variant"))
        table.ratio_curves = {a: [(float(u), stats[(float(u), a)]) for u in ratios] for a in ARMS}
    return table


def pattern_ordering(cfg: ExperimentConfig, runner: Runner, seeds=None, variant: str = "vanilla",
                     done=None, on_row=None) -> dict:
    """Mean MAE per missingness pattern for one arm."""
    seeds = tuple(cfg.grid.seeds if seeds is None else seeds)
    grid = ExperimentGrid(("random", "block", "mixed"), (cfg.missing.rate,), (cfg.data.unobserved_ratio,),
                          (variant,), seeds)
    rows = run_cells(grid.cells(), runner, done, on_row)
    stats = group_mae(rows, ("pattern",))
    return {p: stats[(p,)] for p in ("random", "block", "mixed")}


# --------------------------------------------------------------------------- retrieval statistics

@dataclass
class RetrievalStats:
    anchors: np.ndarray          # [A] window starts
    offsets: np.ndarray          # [A, K_w] signed time-of-day offsets in steps
    bins: np.ndarray             # every offset in (-steps_per_day/2, steps_per_day/2]
    counts: np.ndarray
    node_donors: dict            # global node id -> list of donor node ids

    @property
    def modal_offset(self) -> int:
        return int(self.bins[int(np.argmax(self.counts))])


def circular_offset(delta, period: int):
    """Map step differences onto the daily cycle, ``(-period/2, period/2]``."""
    d = np.mod(np.asarray(delta), period)
    return np.where(d > period // 2, d - period, d)


def retrieval_stats(index: RetrievalIndex, anchors=None, stride: int = 1) -> RetrievalStats:
    """Daily-phase offsets between each anchor window and its top-``K_w`` retrieved windows."""
    W = index.window_embeddings.shape[0]
    if anchors is None:
        anchors = np.flatnonzero(index.retrievable.numpy())[::stride]
    anchors = np.asarray(anchors, dtype=int)
    period = index.steps_per_day
    Q, _ = retrieve_windows(index, torch.as_tensor(anchors))
    offsets = circular_offset(Q.numpy() - anchors[:, None], period)
    bins = np.arange(period // 2 - period + 1, period // 2 + 1)
    counts = np.bincount(offsets.ravel() - bins[0], minlength=bins.size)
    J, _ = retrieve_nodes(index, torch.arange(len(index.node_ids)))
    donors = {int(index.node_ids[i]): index.node_ids[J[i].numpy()].tolist() for i in range(len(index.node_ids))}
    return RetrievalStats(anchors, offsets, bins, counts, donors)


def write_offsets(stats: RetrievalStats, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["offset", "count"])
        for b, c in zip(stats.bins, stats.counts):
            w.writerow([int(b), int(c)])


def read_offsets(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([int(r["offset"]) for r in rows]), np.array([int(r["count"]) for r in rows])
