"""Monte-Carlo and exact checks of the three analytic statements behind the wrapper:
distance contraction and volume collapse under random missingness, the transport bound for
retrieval averaging, and the information gain of an informative missingness mask."""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

MAX_ENUM_DIM = 12
REPORT_FIELDS = ["proposition", "setting", "analytic", "empirical", "SE", "pass"]


@dataclass
class CheckRow:
    proposition: str
    setting: str
    analytic: float
    empirical: float
    se: float
    passed: bool

    def as_csv(self) -> dict:
        return {"proposition": self.proposition, "setting": self.setting, "analytic": repr(self.analytic),
                "empirical": repr(self.empirical), "SE": repr(self.se), "pass": str(bool(self.passed))}


def _within(diff: float, se: float, k: float = 4.0) -> bool:
    # a zero SE means the estimator is degenerate; then only exact agreement passes
    return abs(diff) < k * se or abs(diff) <= 1e-12


def _masks(n: int):
    """All ``2^n`` binary masks as an integer array ``[2^n, n]``."""
    if n > MAX_ENUM_DIM:
        raise ValueError(f"exhaustive enumeration limited to n <= {MAX_ENUM_DIM}")
    return np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.int64)


def _mask_probs(masks, p: float):
    k = masks.sum(1)
    n = masks.shape[1]
    return (1 - p) ** k * p ** (n - k)


# --------------------------------------------------------------------------- distance contraction

@dataclass
class ContractionTrial:
    x: np.ndarray
    y: np.ndarray
    z_x: np.ndarray
    z_y: np.ndarray
    p: float
    n_trials: int = 20000
    seed: int = 0

    def __post_init__(self):
        self.x, self.y = np.asarray(self.x, float), np.asarray(self.y, float)
        self.z_x, self.z_y = np.asarray(self.z_x, float), np.asarray(self.z_y, float)
        if not 0 < self.p < 1:
            raise ValueError("p must lie in (0, 1)")
        if self.x.ndim != 1 or self.x.size < 1:
            raise ValueError("need n >= 1")
        if not (self.x.shape == self.y.shape == self.z_x.shape == self.z_y.shape):
            raise ValueError("x, y, z_x, z_y must share one length")

    @property
    def n(self) -> int:
        return self.x.size


@dataclass
class ContractionReport:
    analytic: float
    empirical: float
    se: float
    exact: Optional[float]
    passed: bool


def contraction_analytic(trial: ContractionTrial) -> float:
    return float((1 - trial.p) * np.sum((trial.x - trial.y) ** 2)
                 + trial.p * np.sum((trial.z_x - trial.z_y) ** 2))


def contraction_exact(trial: ContractionTrial) -> float:
    """Expectation of the squared imputed distance by summing over every mask pattern."""
    R = _masks(trial.n)
    d = R * (trial.x - trial.y) + (1 - R) * (trial.z_x - trial.z_y)
    return math.fsum((_mask_probs(R, trial.p) * (d ** 2).sum(1)).tolist())


def contraction_monte_carlo(trial: ContractionTrial):
    rng = np.random.default_rng(trial.seed)
    r = (rng.random((trial.n_trials, trial.n)) >= trial.p).astype(float)
    d = r * (trial.x - trial.y) + (1 - r) * (trial.z_x - trial.z_y)
    s = (d ** 2).sum(1)
    return float(s.mean()), float(s.std(ddof=1) / np.sqrt(s.size))


def verify_contraction(trial: ContractionTrial) -> ContractionReport:
    analytic = contraction_analytic(trial)
    emp, se = contraction_monte_carlo(trial)
    exact = contraction_exact(trial) if trial.n <= MAX_ENUM_DIM else None
    ok = _within(emp - analytic, se) and (exact is None or abs(exact - analytic) <= 1e-12)
    return ContractionReport(analytic, emp, se, exact, ok)


# --------------------------------------------------------------------------- volume collapse

@dataclass
class VolumeTrial:
    n: int
    p: float
    n_trials: int = 20000
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.p < 1:
            raise ValueError("p must lie in (0, 1)")
        if self.n < 1:
            raise ValueError("need n >= 1")


@dataclass
class VolumeReport:
    expected_volume_factor: float     # E[prod r_i] = (1-p)^n
    expected_metric_volume: float     # sqrt(det E[g]) = (1-p)^(n/2)
    jensen_gap: float
    empirical: float
    se: float
    exact: Optional[float]
    passed: bool


def volume_exact(trial: VolumeTrial) -> float:
    R = _masks(trial.n)
    return math.fsum((_mask_probs(R, trial.p) * R.prod(1)).tolist())


def verify_volume(trial: VolumeTrial) -> VolumeReport:
    q = 1 - trial.p
    factor, metric = q ** trial.n, q ** (trial.n / 2)
    rng = np.random.default_rng(trial.seed)
    prod = (rng.random((trial.n_trials, trial.n)) >= trial.p).all(1).astype(float)
    emp, se = float(prod.mean()), float(prod.std(ddof=1) / np.sqrt(prod.size))
    exact = volume_exact(trial) if trial.n <= MAX_ENUM_DIM else None
    gap = metric - factor
    ok = _within(emp - factor, se) and gap >= 0 and (exact is None or abs(exact - factor) <= 1e-12)
    return VolumeReport(factor, metric, gap, emp, se, exact, ok)


def default_contraction_trials(n_trials: int = 20000, seed: int = 0) -> list:
    """Twelve settings over dimension, missing rate and imputation rule (zero, mean, random)."""
    rng = np.random.default_rng(seed)
    specs = [(1, 0.1, "zero"), (1, 0.5, "random"), (3, 0.2, "zero"), (3, 0.5, "mean"),
             (4, 0.3, "random"), (5, 0.7, "zero"), (8, 0.1, "mean"), (8, 0.4, "random"),
             (10, 0.6, "mean"), (12, 0.2, "random"), (12, 0.9, "zero"), (20, 0.3, "mean")]
    out = []
    for k, (n, p, rule) in enumerate(specs):
        x, y = rng.normal(size=n), rng.normal(size=n) + 1.0
        if rule == "zero":
            zx = zy = np.zeros(n)
        elif rule == "mean":
            zx, zy = np.full(n, x.mean()), np.full(n, y.mean())
        else:
            zx, zy = rng.normal(size=n), rng.normal(size=n)
        out.append((f"n={n},p={p},z={rule}", ContractionTrial(x, y, zx, zy, p, n_trials, seed + k)))
    return out


# --------------------------------------------------------------------------- transport bound

@dataclass
class TransportTrial:
    history: np.ndarray          # [N, d]
    target: np.ndarray           # [d]
    K: int
    z: Optional[np.ndarray] = None

    def __post_init__(self):
        self.history = np.atleast_2d(np.asarray(self.history, float))
        self.target = np.asarray(self.target, float)
        if self.K < 1:
            raise ValueError("K must be positive")
        if self.K > self.history.shape[0]:
            raise ValueError(f"K={self.K} exceeds N={self.history.shape[0]}")
        if self.z is None:
            self.z = np.zeros_like(self.target)


@dataclass
class TransportOutcome:
    distance: float              # ||x_jigsaw - x*||
    sigma_hist: float
    eps_ret: float
    bound: float                 # sigma_hist / sqrt(K) + eps_ret
    crude_distance: float        # ||z - x*||
    delta_ot: float              # crude_distance - distance
    condition: bool              # crude_distance > bound
    holds: bool


def transport_trial(trial: TransportTrial) -> TransportOutcome:
    """Exact K-nearest-neighbour retrieval; the jigsaw estimate is the retrieved mean."""
    H, x = trial.history, trial.target
    d2 = ((H - x) ** 2).sum(1)
    nn = np.argsort(d2, kind="stable")[: trial.K]
    est = H[nn].mean(0)
    sigma = float(np.sqrt(((H - H.mean(0)) ** 2).sum(1).mean()))
    eps = float(np.sqrt(d2[nn].mean()))
    bound = sigma / np.sqrt(trial.K) + eps
    dist = float(np.linalg.norm(est - x))
    crude = float(np.linalg.norm(trial.z - x))
    return TransportOutcome(dist, sigma, eps, bound, crude, crude - dist, crude > bound,
                            dist <= bound + 1e-12)


@dataclass
class TransportReport:
    pass_rate: float
    mean_distance: float
    mean_distance_se: float
    mean_bound: float
    n_condition: int
    n_condition_improved: int
    passed: bool
    outcomes: list = field(repr=False, default_factory=list)


def verify_transport(n_trials: int = 1000, N: int = 500, d: int = 2, K: int = 25, seed: int = 0,
                     center: float = 3.0, min_pass_rate: float = 0.99) -> TransportReport:
    """Gaussian historical clouds with a fresh target drawn from the same law; crude fill z = 0."""
    if K > N:
        raise ValueError(f"K={K} exceeds N={N}")
    rng = np.random.default_rng(seed)
    outs = []
    for _ in range(n_trials):
        H = center + rng.normal(size=(N, d))
        x = center + rng.normal(size=d)
        outs.append(transport_trial(TransportTrial(H, x, K)))
    dist = np.array([o.distance for o in outs])
    rate = float(np.mean([o.holds for o in outs]))
    cond = [o for o in outs if o.condition]
    improved = sum(o.delta_ot > 0 for o in cond)
    ok = rate >= min_pass_rate and improved == len(cond)
    return TransportReport(rate, float(dist.mean()), float(dist.std(ddof=1) / np.sqrt(dist.size)),
                           float(np.mean([o.bound for o in outs])), len(cond), improved, ok, outs)


# --------------------------------------------------------------------------- mask information

@dataclass
class MaskInfoTrial:
    n_samples: int = 200000
    rho: float = 0.8             # correlation of the neighbour reading with the target
    tau_c: float = 0.5           # censoring threshold on Y
    p_high: float = 0.9          # P(missing | Y >= tau_c)
    p_low: float = 0.1           # P(missing | Y < tau_c)
    degree: int = 3              # polynomial degree of the conditional-mean regression
    seed: int = 0


@dataclass
class MaskInfoReport:
    mse_without_mask: float
    mse_with_mask: float
    delta_mask: float
    se: float
    passed: bool


def simulate_mask_info(trial: MaskInfoTrial, rng: np.random.Generator):
    """Gaussian target, one correlated neighbour, threshold-censored missingness, zero fill."""
    Y = rng.normal(size=trial.n_samples)
    X = trial.rho * Y + np.sqrt(1 - trial.rho ** 2) * rng.normal(size=trial.n_samples)
    p_miss = np.where(Y >= trial.tau_c, trial.p_high, trial.p_low)
    M = (rng.random(trial.n_samples) >= p_miss).astype(float)
    return Y, X * M, M


def _poly(x, degree):
    return np.stack([x ** k for k in range(degree + 1)], axis=1)


def _mse_gap(trial: MaskInfoTrial) -> MaskInfoReport:
    rng = np.random.default_rng(trial.seed)
    Y, Xt, M = simulate_mask_info(trial, rng)
    F0 = _poly(Xt, trial.degree)
    F1 = np.concatenate([F0, M[:, None]], axis=1)
    half = trial.n_samples // 2
    errs = []
    for F in (F0, F1):
        coef, *_ = np.linalg.lstsq(F[:half], Y[:half], rcond=None)
        errs.append((Y[half:] - F[half:] @ coef) ** 2)
    diff = errs[0] - errs[1]
    se = float(diff.std(ddof=1) / np.sqrt(diff.size))
    return MaskInfoReport(float(errs[0].mean()), float(errs[1].mean()), float(diff.mean()), se, False)


def verify_mask_info(trial: MaskInfoTrial) -> MaskInfoReport:
    """Held-out MSE of regressions on the imputed reading, without and with the mask.

    Passes when the mask lowers the error by more than two standard errors.
    """
    if trial.p_high <= trial.p_low:
        raise ValueError("uninformative missingness: p_high must exceed p_low")
    rep = _mse_gap(trial)
    rep.passed = rep.delta_mask > 2 * rep.se
    return rep


def verify_mask_control(trial: MaskInfoTrial) -> MaskInfoReport:
    """MCAR control at ``p_high``: passes when the gap is within two standard errors of zero."""
    rep = _mse_gap(replace(trial, p_low=trial.p_high))
    rep.passed = abs(rep.delta_mask) < 2 * rep.se
    return rep


def mixture_mask_means(p_high: float, p_low: float, weight: float = 0.5, mu: float = 1.0):
    """Closed form ``E[Y | M=0]`` and ``E[Y | M=1]`` for ``Y = ±mu`` with P(Y=+mu) = weight,
    missing with probability ``p_high`` when ``Y = +mu`` and ``p_low`` otherwise."""
    a_miss, b_miss = weight * p_high, (1 - weight) * p_low
    a_obs, b_obs = weight * (1 - p_high), (1 - weight) * (1 - p_low)
    return mu * (a_miss - b_miss) / (a_miss + b_miss), mu * (a_obs - b_obs) / (a_obs + b_obs)


def verify_mixture_means(n_samples: int = 200000, p_high: float = 0.9, p_low: float = 0.1,
                         weight: float = 0.5, mu: float = 1.0, seed: int = 0):
    """Regression of Y on the mask indicator (group means) against the closed form.

    Returns ``[(m, analytic, empirical, se, passed)]`` for ``m = 0, 1``.
    """
    rng = np.random.default_rng(seed)
    Y = np.where(rng.random(n_samples) < weight, mu, -mu)
    p = np.where(Y > 0, p_high, p_low)
    M = rng.random(n_samples) >= p
    analytic = mixture_mask_means(p_high, p_low, weight, mu)
    out = []
    for m, a in zip((0, 1), analytic):
        grp = Y[M == bool(m)]
        emp, se = float(grp.mean()), float(grp.std(ddof=1) / np.sqrt(grp.size))
        out.append((m, a, emp, se, abs(emp - a) < 2 * se))
    return out


# --------------------------------------------------------------------------- full report

def run_all(seed: int = 0, n_trials: int = 20000) -> list:
    rows = []
    for setting, trial in default_contraction_trials(n_trials, seed):
        rep = verify_contraction(trial)
        rows.append(CheckRow("contraction", setting, rep.analytic, rep.empirical, rep.se, rep.passed))
        if rep.exact is not None:
            rows.append(CheckRow("contraction_exact", setting, rep.analytic, rep.exact, 0.0,
                                 abs(rep.exact - rep.analytic) <= 1e-12))
    for k, (n, p) in enumerate([(1, 0.3), (4, 0.2), (8, 0.1), (12, 0.05)]):
        rep = verify_volume(VolumeTrial(n, p, n_trials, seed + 100 + k))
        setting = f"n={n},p={p}"
        rows.append(CheckRow("volume", setting, rep.expected_volume_factor, rep.empirical, rep.se, rep.passed))
        rows.append(CheckRow("volume_jensen_gap", setting, rep.expected_metric_volume,
                             rep.expected_volume_factor, 0.0, rep.jensen_gap >= 0))
    tr = verify_transport(seed=seed + 200)
    rows.append(CheckRow("transport_bound", "N=500,K=25,d=2,trials=1000", tr.mean_bound, tr.mean_distance,
                         tr.mean_distance_se, tr.passed))
    rows.append(CheckRow("transport_pass_rate", "N=500,K=25,d=2,trials=1000", 0.99, tr.pass_rate, 0.0,
                         tr.pass_rate >= 0.99))
    rows.append(CheckRow("transport_improvement", "trials meeting the improvement condition",
                         float(tr.n_condition), float(tr.n_condition_improved), 0.0,
                         tr.n_condition_improved == tr.n_condition))
    base = MaskInfoTrial(seed=seed + 300)
    cen = verify_mask_info(base)
    rows.append(CheckRow("mask_info", "censored p_high=0.9,p_low=0.1", 0.0, cen.delta_mask, cen.se, cen.passed))
    ctl = verify_mask_control(base)
    rows.append(CheckRow("mask_info_mcar", "control p_high=p_low=0.9", 0.0, ctl.delta_mask, ctl.se, ctl.passed))
    for m, a, emp, se, ok in verify_mixture_means(seed=seed + 400):
        rows.append(CheckRow("mask_info_mixture", f"E[Y|M={m}]", a, emp, se, ok))
    return rows


def write_report(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow(r.as_csv())


def read_report(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
