"""Dataset loading plus the single-run protocol shared by every experiment: split, simulate
missingness, train, and score the held-out unobserved nodes."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import ExperimentConfig
from .data import (AdjacencyMatrix, DataError, MissingnessSpec, SensorMetadata, TimeSeriesPanel,
                   build_adjacency, read_matrix_csv, read_meta_csv, read_series_csv, simulate_missingness,
                   split_nodes, synthetic_panel, write_matrix_csv)
from .metrics import MetricReport, compute_metrics
from .model import build_model
from .sampling import PanelView, eval_stream, make_view
from .training import TrainData, TrainResult, make_context, predict, train

# per-run seed offsets for the three independent missingness realizations
VAL_SEED_OFFSET = 1000
TEST_SEED_OFFSET = 2000
STREAM_SEED_OFFSET = 99

PREPARED_FILES = ("normalized.csv", "meta.csv", "adj.csv", "mask.csv", "splits.csv")


@dataclass
class Dataset:
    panel: TimeSeriesPanel
    metadata: SensorMetadata
    adjacency: AdjacencyMatrix

    @property
    def node_features(self) -> np.ndarray:
        return self.metadata.features()


def synthetic_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.data
    panel, meta, adj = synthetic_panel(d.n_nodes, d.n_steps, d.sample_period_minutes, seed=d.seed,
                                       noise_std=d.noise_std, event_std=d.event_std,
                                       threshold=d.threshold)
    return Dataset(panel, meta, adj)


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.data.source == "synthetic":
        return synthetic_dataset(cfg)
    return load_prepared(cfg.data.source)


def missingness_spec(cfg: ExperimentConfig, pattern: str, rate: float, seed: int) -> MissingnessSpec:
    m = cfg.missing
    return MissingnessSpec(pattern, rate, (m.block_len_min, m.block_len_max), m.block_spatial_hops,
                           m.block_max_nodes, seed)


# --------------------------------------------------------------------------- prepared datasets

def _write_csv_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def prepare_dataset(ds: Dataset, out_dir, cfg: ExperimentConfig) -> dict:
    """Write the normalized panel, metadata, adjacency, default split and simulated mask.

    Normalization statistics go into the returned manifest so the raw panel is recoverable.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    d, m = cfg.data, cfg.missing
    obs, unobs = split_nodes(ds.panel.n_nodes, d.unobserved_ratio, d.seed)
    sim = simulate_missingness(ds.panel, obs, missingness_spec(cfg, m.pattern, m.rate, d.seed), ds.adjacency)
    view = make_view(ds.panel, ds.adjacency, sim, obs, unobs)
    z = view.scaler.transform(ds.panel.values)
    with open(out / "normalized.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        for row, avail in zip(z, ds.panel.base_mask):
            w.writerow([repr(float(v)) if a else "" for v, a in zip(row, avail)])
    attrs = ds.metadata.attributes
    n_attr = 0 if attrs is None else attrs.shape[1]
    header = ["sensor_id", "x", "y"]
    if n_attr:
        for g, size in enumerate(ds.metadata.attribute_groups):
            header += [f"attr{g}.{k}" for k in range(size)]
    rows = []
    for i, sid in enumerate(ds.panel.sensor_ids):
        row = [sid, repr(float(ds.metadata.coords[i, 0])), repr(float(ds.metadata.coords[i, 1]))]
        if n_attr:
            row += [repr(float(a)) for a in attrs[i]]
        rows.append(row)
    _write_csv_rows(out / "meta.csv", header, rows)
    write_matrix_csv(out / "adj.csv", ds.adjacency.weights, fmt="%.17g")
    write_matrix_csv(out / "mask.csv", sim, fmt="%d")
    roles = np.array(["observed"] * ds.panel.n_nodes, dtype=object)
    roles[unobs] = "unobserved"
    _write_csv_rows(out / "splits.csv", ["node", "sensor_id", "role"],
                    [[i, ds.panel.sensor_ids[i], roles[i]] for i in range(ds.panel.n_nodes)])
    return {
        "files": list(PREPARED_FILES),
        "scaler": {"mean": view.scaler.mean, "std": view.scaler.std},
        "sample_period_minutes": ds.panel.sample_period_minutes,
        "adjacency": {"sigma": ds.adjacency.sigma, "threshold": ds.adjacency.threshold},
    }


def load_prepared(path) -> Dataset:
    root = Path(path)
    manifest_path = root / "manifest.json"
    for name in PREPARED_FILES + ("manifest.json",):
        if not (root / name).is_file():
            raise DataError(f"prepared dataset incomplete: missing {root / name}")
    manifest = json.loads(manifest_path.read_text())
    sc = manifest["outputs"]["scaler"]
    z = read_matrix_csv(root / "normalized.csv", allow_blank=True)
    base = (~np.isnan(z)).astype(np.int8)
    values = np.where(base == 1, np.nan_to_num(z) * sc["std"] + sc["mean"], 0.0)
    ids, meta = read_meta_csv(root / "meta.csv")
    panel = TimeSeriesPanel(values, base, manifest["outputs"]["sample_period_minutes"], ids)
    a = manifest["outputs"]["adjacency"]
    adj = AdjacencyMatrix(read_matrix_csv(root / "adj.csv"), a["sigma"], a["threshold"])
    return Dataset(panel, meta, adj)


def dataset_from_files(series, meta, adj=None, sample_period_minutes: int = 5,
                       threshold: float = 0.1) -> Dataset:
    panel = read_series_csv(series, sample_period_minutes)
    ids, metadata = read_meta_csv(meta)
    if len(ids) != panel.n_nodes:
        raise DataError(f"{meta}: {len(ids)} sensors but series has {panel.n_nodes} rows")
    panel.sensor_ids = list(ids)
    if adj is not None:
        w = read_matrix_csv(adj)
        if w.shape != (panel.n_nodes, panel.n_nodes):
            raise DataError(f"{adj}: expected a {panel.n_nodes}x{panel.n_nodes} matrix")
        adjacency = AdjacencyMatrix(w, float("nan"), threshold)
    else:
        adjacency = build_adjacency(metadata.coords, threshold)
    return Dataset(panel, metadata, adjacency)


# --------------------------------------------------------------------------- one run

@dataclass
class RunSetup:
    train: PanelView
    val: PanelView
    test: PanelView
    observed: np.ndarray
    unobserved: np.ndarray
    node_features: np.ndarray


def setup_run(ds: Dataset, cfg: ExperimentConfig, pattern: str, rate: float, seed: int,
              unobserved_ratio: Optional[float] = None) -> RunSetup:
    """Split nodes and draw independent train / validation / test missingness realizations.

    The scaler is fitted once on the training realization and reused everywhere.
    """
    ratio = cfg.data.unobserved_ratio if unobserved_ratio is None else unobserved_ratio
    obs, unobs = split_nodes(ds.panel.n_nodes, ratio, seed)
    masks = [simulate_missingness(ds.panel, obs, missingness_spec(cfg, pattern, rate, seed + off),
                                  ds.adjacency)
             for off in (0, VAL_SEED_OFFSET, TEST_SEED_OFFSET)]
    tr = make_view(ds.panel, ds.adjacency, masks[0], obs, unobs)
    va = make_view(ds.panel, ds.adjacency, masks[1], obs, unobs, scaler=tr.scaler)
    te = make_view(ds.panel, ds.adjacency, masks[2], obs, unobs, scaler=tr.scaler)
    return RunSetup(tr, va, te, obs, unobs, ds.node_features)


@dataclass
class RunOutput:
    variant: str
    pattern: str
    rate: float
    seed: int
    unobserved_ratio: float
    report: MetricReport
    result: TrainResult
    model: torch.nn.Module = field(repr=False, default=None)
    setup: RunSetup = field(repr=False, default=None)
    elapsed: float = 0.0

    def row(self) -> dict:
        return {"pattern": self.pattern, "rate": self.rate, "variant": self.variant, "seed": self.seed,
                "mae": self.report.mae, "rmse": self.report.rmse,
                "mape": "" if self.report.mape is None else self.report.mape,
                "unobserved_ratio": self.unobserved_ratio}


def base_variant(variant: str) -> tuple[str, Optional[str]]:
    """``"vanilla+mean"`` -> ``("vanilla", "mean")``: model variant plus optional pre-imputer."""
    name, _, imputer = variant.partition("+")
    return name, imputer or None


def variant_setup(ds: Dataset, cfg: ExperimentConfig, variant: str, pattern: str, rate: float, seed: int,
                  unobserved_ratio: float) -> RunSetup:
    """``setup_run`` plus the optional pre-imputation named in the variant."""
    from .imputers import preimpute_view
    setup = setup_run(ds, cfg, pattern, rate, seed, unobserved_ratio)
    _, imputer = base_variant(variant)
    if imputer is not None:
        setup = replace(setup, train=preimpute_view(setup.train, imputer),
                        val=preimpute_view(setup.val, imputer), test=preimpute_view(setup.test, imputer))
    return setup


def model_for(ds: Dataset, cfg: ExperimentConfig, variant: str, seed: int):
    torch.manual_seed(seed)
    mc = cfg.model
    return build_model(base_variant(variant)[0], cfg.train.t, ds.panel.n_steps, ds.node_features.shape[1],
                       mc.hidden, mc.order, mc.n_layers, mc.d_m, mc.gamma, cfg.jigsaw_kwargs())


def run_single(ds: Dataset, cfg: ExperimentConfig, variant: str, pattern: Optional[str] = None,
               rate: Optional[float] = None, seed: int = 0,
               unobserved_ratio: Optional[float] = None) -> RunOutput:
    pattern = cfg.missing.pattern if pattern is None else pattern
    rate = cfg.missing.rate if rate is None else rate
    ratio = cfg.data.unobserved_ratio if unobserved_ratio is None else unobserved_ratio
    t0 = time.time()
    setup = variant_setup(ds, cfg, variant, pattern, rate, seed, ratio)
    model = model_for(ds, cfg, variant, seed)
    result = train(model, TrainData(setup.train, setup.val, setup.node_features), replace(cfg.train, seed=seed))
    report = evaluate_model(model, setup, cfg, seed)
    return RunOutput(variant, pattern, rate, seed, ratio, report, result, model, setup, time.time() - t0)


def test_stream(setup: RunSetup, cfg: ExperimentConfig, seed: int):
    size = min(cfg.train.subgraph_size, setup.observed.size + 1)
    return eval_stream(setup.test, setup.unobserved, size, cfg.train.t, seed=seed + STREAM_SEED_OFFSET,
                       node_sampling=cfg.train.node_sampling)


def evaluate_model(model, setup: RunSetup, cfg: ExperimentConfig, seed: int) -> MetricReport:
    """Score the true unobserved nodes on the test missingness realization."""
    ctx = make_context(model, setup.test, setup.node_features, cfg.train.t, exclude_targets=True)
    samples = test_stream(setup, cfg, seed)
    Y_hat = predict(model, samples, ctx)
    Y = np.stack([s.Y for s in samples])
    mask = np.stack([s.Y_mask for s in samples])
    return compute_metrics(Y_hat, Y, mask, setup.test.scaler, cfg.eval.mape_eps, cfg.eval.mape_max_excluded)
