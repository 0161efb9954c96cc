"""The outer synthesis loop: fit the error GP, train, collect hard samples, augment.

Three strategies share the loop:

``adaptive``
    hard samples are re-queried at the centers of their confidence ellipsoids;
``uniform``
    the same number of fresh states drawn uniformly from ``X``;
``nogp``
    no GP at all; the estimator trusts perception and no data is collected.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import neural
from .confset import EstimatorConfig, estimate_batch
from .dynamics import ContractViolation, SystemModel, perceive
from .hetgp import HetGPModel, PerceptionDataset, fit_heteroscedastic
from .neural import MlpParams
from .synthesis import (
    CertTrainingSet,
    LossBreakdown,
    TrainConfig,
    build_training_set,
    controller_input,
    init_networks,
    train,
)

__all__ = [
    "STRATEGIES",
    "AdaptiveConfig",
    "IterationReport",
    "RunOutcome",
    "init_dataset",
    "hard_scores",
    "collect_hard_samples",
    "augment",
    "run",
]

log = logging.getLogger(__name__)

STRATEGIES = ("adaptive", "uniform", "nogp")


@dataclass(frozen=True)
class AdaptiveConfig:
    """``dedupe_radius=None`` means ``0.05 * diam(X)``; ``budget`` caps perception calls."""

    max_iterations: int = 6
    initial_N: int = 100
    hard_threshold: float = 1e-3
    dedupe_radius: float | None = None
    strategy: str = "adaptive"
    budget: int | None = None

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ContractViolation("max_iterations must be at least 1")
        if self.initial_N < 5:
            raise ContractViolation("initial_N must be at least 5")
        if not self.hard_threshold >= 0:
            raise ContractViolation("hard_threshold must be non-negative")
        if self.dedupe_radius is not None and self.dedupe_radius <= 0:
            raise ContractViolation("dedupe_radius must be positive")
        if self.strategy not in STRATEGIES:
            raise ContractViolation(f"strategy must be one of {STRATEGIES}")
        if self.budget is not None and self.budget < 5:
            raise ContractViolation("budget must allow at least 5 samples")

    def radius(self, sys: SystemModel) -> float:
        return 0.05 * sys.diameter if self.dedupe_radius is None else self.dedupe_radius


@dataclass
class IterationReport:
    iteration: int
    dataset_size: int
    perception_calls: int
    hard_count: int
    loss: LossBreakdown
    unsafe_ratio: float | None = None
    wall_time: float = 0.0

    def to_json(self) -> dict:
        # wall time is left out so that manifests are reproducible byte for byte
        return {
            "iteration": self.iteration,
            "dataset_size": self.dataset_size,
            "perception_calls": self.perception_calls,
            "hard_count": self.hard_count,
            "loss": self.loss.to_json(),
            "unsafe_ratio": None if self.unsafe_ratio is None else repr(self.unsafe_ratio),
        }


@dataclass
class RunOutcome:
    """Result of :func:`run`; on failure ``hard_samples`` holds the last ``H``."""

    success: bool
    h: MlpParams
    pi: MlpParams
    model: HetGPModel | None
    dataset: PerceptionDataset | None
    hard_samples: np.ndarray
    reports: list[IterationReport]
    snapshots: list[PerceptionDataset | None] = field(default_factory=list)
    gp_fits: int = 0
    perception_calls: int = 0
    last_training_log: str = ""

    def manifest(self, config: dict | None = None) -> dict:
        return {
            "config": config or {},
            "outcome": "success" if self.success else "failure",
            "iterations": [r.to_json() for r in self.reports],
            "gp_fits": self.gp_fits,
            "perception_calls": self.perception_calls,
            "hard_samples": [[repr(float(v)) for v in row] for row in self.hard_samples] if not self.success else [],
        }


def init_dataset(sys: SystemModel, N: int, rng: np.random.Generator) -> PerceptionDataset:
    """``N`` states drawn uniformly from ``X`` paired with their perceptions."""
    if N < 5:
        raise ContractViolation("need N >= 5")
    x = sys.sample_states(rng, N)
    return PerceptionDataset(perceive(sys, x), x)


def hard_scores(h: MlpParams, pi: MlpParams, ds: CertTrainingSet, sys: SystemModel, alpha_slope: float, chunk: int = 512) -> np.ndarray:
    """Per entry of the training set, ``max_j relu(-(dh/dx . f + alpha h))`` over its inner samples."""
    N, M2, n = ds.samples.shape
    out = np.empty(N)
    for s in range(0, N, chunk):
        sl = slice(s, min(N, s + chunk))
        u = neural.forward(pi, controller_input(sys, ds.centers[sl]))
        xs = ds.samples[sl].reshape(-1, n)
        u_rep = np.repeat(u, M2, axis=0)
        hv, q, _ = neural.barrier_forward(h, xs, sys.f(xs, u_rep))
        r = (q + alpha_slope * hv).reshape(-1, M2)
        out[sl] = np.maximum(-r, 0.0).max(axis=1)
    return out


def collect_hard_samples(xhat, scores, threshold: float, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Perceived states whose score exceeds ``threshold``, thinned to ``radius``.

    Candidates are visited by decreasing score (ties keep the earlier index)
    and kept unless a survivor already lies within ``radius``.  Returns the
    survivors and their scores in that order.
    """
    xhat = np.asarray(xhat, dtype=float)
    scores = np.asarray(scores, dtype=float)
    cand = np.flatnonzero(scores > threshold)
    order = cand[np.argsort(-scores[cand], kind="stable")]
    kept: list[int] = []
    for i in order:
        if kept and np.min(np.linalg.norm(xhat[kept] - xhat[i], axis=1)) <= radius:
            continue
        kept.append(int(i))
    kept_arr = np.array(kept, dtype=int)
    return xhat[kept_arr].reshape(-1, xhat.shape[1]), scores[kept_arr]


def augment(sys: SystemModel, D: PerceptionDataset, H, model, ecfg: EstimatorConfig | None = None) -> PerceptionDataset:
    """Query perception at the (projected) ellipsoid centers of the hard samples."""
    H = np.asarray(H, dtype=float).reshape(-1, sys.n)
    if len(H) == 0:
        return D
    centers, _ = estimate_batch(model, ecfg or EstimatorConfig(), H)
    c = sys.project(centers)
    return D.extend(perceive(sys, c), c)


def run(
    sys: SystemModel,
    acfg: AdaptiveConfig,
    tcfg: TrainConfig,
    ecfg: EstimatorConfig,
    rng: np.random.Generator,
    fitter: Callable[..., HetGPModel] = fit_heteroscedastic,
    evaluate: Callable[[MlpParams, MlpParams, HetGPModel | None], float] | None = None,
) -> RunOutcome:
    """Algorithm loop; stops on an empty hard set (success) or after ``max_iterations``.

    Networks are initialised once and warm-started across iterations.  When
    ``acfg.budget`` is set, the initial dataset and every augmentation are
    truncated so that the number of perception calls never exceeds it; once
    it is spent the loop ends after the next training round.  ``evaluate``,
    if given, is called after each iteration and its value stored in the
    report.
    """
    # separate streams keep the network initialisation identical across strategies
    net_rng, data_rng, train_rng, gp_rng = [np.random.default_rng(int(s)) for s in rng.integers(0, 2**63, size=4)]
    strategy = acfg.strategy
    radius = acfg.radius(sys)
    h, pi = init_networks(sys, tcfg, net_rng)

    D = None
    calls = 0
    if strategy != "nogp":
        n0 = acfg.initial_N if acfg.budget is None else min(acfg.initial_N, acfg.budget)
        D = init_dataset(sys, n0, data_rng)
        calls = n0

    reports: list[IterationReport] = []
    snapshots: list[PerceptionDataset | None] = []
    model = None
    fits = 0
    H = np.empty((0, sys.n))
    train_log = ""
    for it in range(1, acfg.max_iterations + 1):
        t0 = time.perf_counter()
        if D is not None:
            model = fitter(D, seed=int(gp_rng.integers(0, 2**31)))
            fits += 1
        ds = build_training_set(sys, model, tcfg, ecfg, train_rng)
        res = train(sys, model, tcfg, ecfg, (h, pi), train_rng, training_set=ds)
        h, pi = res.h, res.pi
        train_log = res.log_csv()
        scores = hard_scores(h, pi, ds, sys, tcfg.alpha_slope)
        H, _ = collect_hard_samples(ds.xhat, scores, acfg.hard_threshold, radius)
        report = IterationReport(it, 0 if D is None else len(D), calls, len(H), res.final)
        snapshots.append(D)
        log.info("%s iteration %d: |D|=%d |H|=%d loss=%.4g", strategy, it, report.dataset_size, len(H), res.final.total)
        if len(H) == 0:
            reports.append(_finish(report, evaluate, h, pi, model, t0))
            return RunOutcome(True, h, pi, model, D, H, reports, snapshots, fits, calls, train_log)
        spent = acfg.budget is not None and calls >= acfg.budget
        if it == acfg.max_iterations or spent:
            reports.append(_finish(report, evaluate, h, pi, model, t0))
            break
        if D is not None:
            room = len(H) if acfg.budget is None else min(len(H), acfg.budget - calls)
            if strategy == "adaptive":
                D = augment(sys, D, H[:room], model, ecfg)
            else:
                x = sys.sample_states(data_rng, room)
                D = D.extend(perceive(sys, x), x)
            calls += room
        reports.append(_finish(report, evaluate, h, pi, model, t0))
    return RunOutcome(False, h, pi, model, D, H, reports, snapshots, fits, calls, train_log)


def _finish(report: IterationReport, evaluate, h, pi, model, t0) -> IterationReport:
    if evaluate is not None:
        report.unsafe_ratio = float(evaluate(h, pi, model))
    report.wall_time = time.perf_counter() - t0
    return report
