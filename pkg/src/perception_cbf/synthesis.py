"""Joint training of the barrier ``h`` and controller ``pi`` on the robust CBF loss.

For perceived states ``xhat_i`` drawn uniformly over ``X`` and points
``x_ij`` drawn uniformly from the confidence ellipsoid ``g(xhat_i)``, the
empirical loss is

    mean_ij  lambda1 * relu(-(dh/dx(x_ij) . f(x_ij, pi(c_i)) + alpha * h(x_ij)))
           + lambda2 * (h(x_ij) if x_ij outside S else -h(x_ij))

with ``c_i`` the ellipsoid center.  Gradients reach ``pi`` through the
control input of ``f``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import neural
from .confset import EstimatorConfig, estimate_batch, sample_uniform
from .dynamics import SystemModel, in_safe_set
from .neural import MlpParams

__all__ = [
    "TrainConfig",
    "CertTrainingSet",
    "LossBreakdown",
    "TrainResult",
    "TrainingDiverged",
    "build_training_set",
    "controller_input",
    "cbf_residual",
    "set_loss_term",
    "loss_and_grad",
    "evaluate_loss",
    "init_networks",
    "train",
]

log = logging.getLogger(__name__)

CLIP_FLAG_FRACTION = 0.2


class TrainingDiverged(FloatingPointError):
    """Raised on a non-finite loss; ``batch`` holds the offending entries."""

    def __init__(self, message: str, batch: dict):
        super().__init__(message)
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    M1: int = 10000
    M2: int = 32
    lambda1: float = 0.01
    lambda2: float = 1.0
    alpha_slope: float = 0.1
    epochs: int = 30
    learning_rate: float = 0.1
    batch_size: int = 256
    hidden: tuple[int, ...] = (128, 128)
    set_margin: float = 1.0
    seed: int = 0
    init_steps: int = 3000
    init_learning_rate: float = 0.5

    def __post_init__(self):
        if self.init_steps < 0:
            raise ValueError("init_steps must be non-negative")
        for name in ("M1", "M2", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0 or self.alpha_slope <= 0 or self.learning_rate < 0:
            raise ValueError("weights, alpha_slope and learning_rate must be non-negative")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass(frozen=True)
class CertTrainingSet:
    """Perceived states, ellipsoid centers/semiaxes and the inner samples ``(M1, M2, n)``."""

    xhat: np.ndarray
    centers: np.ndarray
    semiaxes: np.ndarray
    samples: np.ndarray
    clip_fraction: np.ndarray

    def __len__(self) -> int:
        return self.xhat.shape[0]

    @property
    def flagged(self) -> np.ndarray:
        return self.clip_fraction > CLIP_FLAG_FRACTION

    @property
    def n_points(self) -> int:
        return self.samples.shape[0] * self.samples.shape[1]


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    cbf_term: float
    set_term: float
    violation_count: int

    def to_json(self) -> dict:
        return {
            "total": repr(self.total),
            "cbf_term": repr(self.cbf_term),
            "set_term": repr(self.set_term),
            "violation_count": self.violation_count,
        }


@dataclass
class TrainResult:
    h: MlpParams
    pi: MlpParams
    final: LossBreakdown
    history: list[LossBreakdown]
    training_set: CertTrainingSet

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "total", "cbf_term", "set_term", "violation_count"])
        for k, b in enumerate(self.history, start=1):
            w.writerow([k, repr(b.total), repr(b.cbf_term), repr(b.set_term), b.violation_count])
        return buf.getvalue()


def controller_input(sys: SystemModel, centers: np.ndarray) -> np.ndarray:
    """Ellipsoid centers as seen by the controller: angles wrapped, nothing clipped."""
    out = np.array(centers, dtype=float, copy=True)
    for i in sys.wrap:
        out[..., i] = (out[..., i] + np.pi) % (2.0 * np.pi) - np.pi
    return out


def build_training_set(
    sys: SystemModel,
    model,
    tcfg: TrainConfig,
    ecfg: EstimatorConfig,
    rng: np.random.Generator,
) -> CertTrainingSet:
    """Draw ``M1`` perceived states over ``X`` and ``M2`` points inside each ellipsoid.

    ``model=None`` gives the perception-trusting estimator ``g(xhat) = {xhat}``
    (ellipsoids floored at ``min_semiaxis``).  Inner samples are projected
    onto ``X``; the projected fraction per entry is recorded.
    """
    xhat = sys.sample_states(rng, tcfg.M1)
    if model is None:
        centers = xhat.copy()
        axes = np.full_like(xhat, ecfg.min_semiaxis)
    else:
        centers, axes = estimate_batch(model, ecfg, xhat)
    raw = sample_uniform(centers, rng, tcfg.M2, semiaxes=axes)
    inside = sys.in_state_box(raw)
    samples = sys.project(raw)
    return CertTrainingSet(xhat, centers, axes, samples, 1.0 - inside.mean(axis=1))


def init_networks(sys: SystemModel, tcfg: TrainConfig, rng: np.random.Generator) -> tuple[MlpParams, MlpParams]:
    """Random weights followed by ``init_steps`` of supervised warm-up.

    The controller regresses onto ``sys.nominal`` (when the benchmark has one)
    and the barrier fits the set term alone, so joint training starts from a
    barrier whose sign already matches ``S``.  With ``init_steps=0`` the
    networks are returned as drawn.
    """
    h = neural.init_mlp(sys.n, 1, rng, tcfg.hidden)
    pi = neural.init_mlp(sys.n, sys.m, rng, tcfg.hidden, head=neural.CONTROLLER, out_lo=sys.control_lo, out_hi=sys.control_hi)
    half = 0.5 * (sys.control_hi - sys.control_lo)
    lr = tcfg.init_learning_rate
    for _ in range(tcfg.init_steps):
        x = sys.sample_states(rng, tcfg.batch_size)
        B = len(x)
        if sys.nominal is not None:
            err = (neural.forward(pi, controller_input(sys, x)) - sys.nominal(x)) / half
            pi = pi.axpy(-lr, neural.grad_params_output(pi, controller_input(sys, x), 2.0 * err / half / B))
        hv = neural.forward(h, x)[:, 0]
        in_s = in_safe_set(sys, x)
        bar = _set_grad(hv, in_s, tcfg.set_margin) / B
        h = h.axpy(-lr, neural.grad_params_output(h, x, bar[:, None]))
    return h, pi


def cbf_residual(h: MlpParams, pi: MlpParams, xhat, center, x, sys: SystemModel, alpha_slope: float):
    """``dh/dx(x) . f(x, pi(c)) + alpha * h(x)``; the loss charges ``max(0, -r)``.

    ``xhat`` is carried for bookkeeping only: the control depends on it solely
    through the precomputed ellipsoid center.
    """
    x = np.asarray(x, dtype=float)
    u = neural.forward(pi, controller_input(sys, np.asarray(center, dtype=float)))
    v = sys.f(np.atleast_2d(x), np.broadcast_to(u, np.atleast_2d(x).shape[:-1] + (sys.m,)))
    hv, q, _ = neural.barrier_forward(h, np.atleast_2d(x), v)
    r = q + alpha_slope * hv
    return float(r[0]) if x.ndim == 1 else r


def _set_term(hv, in_s, margin):
    return np.where(in_s, -np.minimum(hv, margin), np.maximum(hv, -margin))


def _set_grad(hv, in_s, margin):
    return np.where(in_s, -1.0 * (hv < margin), 1.0 * (hv > -margin))


def set_loss_term(h: MlpParams, x, sys: SystemModel, margin: float = 1.0):
    """``h(x)`` outside the safe set, ``-h(x)`` inside.

    Saturates at ``-margin`` once ``h`` has the right sign with that margin,
    which keeps the loss bounded below.
    """
    hv = neural.forward(h, np.atleast_2d(x))[:, 0]
    term = _set_term(hv, in_safe_set(sys, np.atleast_2d(x)), margin)
    return float(term[0]) if np.ndim(x) == 1 else term


def loss_and_grad(
    h: MlpParams,
    pi: MlpParams,
    centers: np.ndarray,
    samples: np.ndarray,
    sys: SystemModel,
    tcfg: TrainConfig,
    need_grad: bool = True,
):
    """Mean loss over ``B`` entries (``samples`` has shape ``(B, M2, n)``).

    Returns ``(LossBreakdown, grad_h, grad_pi)``; the gradients are None when
    ``need_grad`` is false.
    """
    B, M2, n = samples.shape
    c_in = controller_input(sys, centers)
    u = neural.forward(pi, c_in)
    xs = samples.reshape(B * M2, n)
    u_rep = np.repeat(u, M2, axis=0)
    v = sys.f(xs, u_rep)
    hv, q, tape = neural.barrier_forward(h, xs, v)
    r = q + tcfg.alpha_slope * hv
    viol = r < 0
    in_s = in_safe_set(sys, xs)
    count = B * M2
    cbf = float(np.maximum(-r, 0.0).sum() / count)
    setv = float(_set_term(hv, in_s, tcfg.set_margin).sum() / count)
    total = tcfg.lambda1 * cbf + tcfg.lambda2 * setv
    br = LossBreakdown(total, cbf, setv, int(viol.sum()))
    if not need_grad:
        return br, None, None
    set_bar = _set_grad(hv, in_s, tcfg.set_margin)
    h_bar = (np.where(viol, -tcfg.lambda1 * tcfg.alpha_slope, 0.0) + tcfg.lambda2 * set_bar) / count
    q_bar = np.where(viol, -tcfg.lambda1, 0.0) / count
    g_h, v_bar = neural.barrier_backward(h, tape, h_bar, q_bar)
    u_bar = np.einsum("bnm,bn->bm", sys.dfdu(xs, u_rep), v_bar)
    u_bar = u_bar.reshape(B, M2, -1).sum(axis=1)
    g_pi = neural.grad_params_output(pi, c_in, u_bar)
    return br, g_h, g_pi


def evaluate_loss(h, pi, ds: CertTrainingSet, sys: SystemModel, tcfg: TrainConfig, chunk: int = 512) -> LossBreakdown:
    """Loss breakdown over the whole training set (chunked, fixed order)."""
    tot = cbf = setv = 0.0
    viol = 0
    N = len(ds)
    for s in range(0, N, chunk):
        idx = slice(s, min(N, s + chunk))
        br, _, _ = loss_and_grad(h, pi, ds.centers[idx], ds.samples[idx], sys, tcfg, need_grad=False)
        w = (idx.stop - idx.start) / N
        cbf += w * br.cbf_term
        setv += w * br.set_term
        viol += br.violation_count
    tot = tcfg.lambda1 * cbf + tcfg.lambda2 * setv
    return LossBreakdown(tot, cbf, setv, viol)


def train(
    sys: SystemModel,
    model,
    tcfg: TrainConfig,
    ecfg: EstimatorConfig,
    init: tuple[MlpParams, MlpParams],
    rng: np.random.Generator | None = None,
    training_set: CertTrainingSet | None = None,
) -> TrainResult:
    """Minibatch SGD on the robust CBF loss.

    A training set is built from ``model`` unless one is supplied.  Each step
    uses ``batch_size`` entries with all of their inner samples.
    """
    rng = np.random.default_rng(tcfg.seed) if rng is None else rng
    ds = build_training_set(sys, model, tcfg, ecfg, rng) if training_set is None else training_set
    h, pi = init
    history = []
    N = len(ds)
    for epoch in range(tcfg.epochs):
        order = rng.permutation(N)
        acc = np.zeros(3)
        viol = 0
        for s in range(0, N, tcfg.batch_size):
            idx = np.sort(order[s : s + tcfg.batch_size])
            br, g_h, g_pi = loss_and_grad(h, pi, ds.centers[idx], ds.samples[idx], sys, tcfg)
            if not np.isfinite(br.total) or not (g_h.is_finite() and g_pi.is_finite()):
                batch = {
                    "epoch": epoch,
                    "indices": idx.tolist(),
                    "centers": ds.centers[idx].tolist(),
                    "samples": ds.samples[idx].tolist(),
                }
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}", batch)
            if tcfg.learning_rate:
                h = h.axpy(-tcfg.learning_rate, g_h)
                pi = pi.axpy(-tcfg.learning_rate, g_pi)
            w = len(idx) / N
            acc += w * np.array([br.total, br.cbf_term, br.set_term])
            viol += br.violation_count
        history.append(LossBreakdown(float(acc[0]), float(acc[1]), float(acc[2]), viol))
        log.debug("epoch %d total=%.5g cbf=%.5g set=%.5g viol=%d", epoch + 1, acc[0], acc[1], acc[2], viol)
    final = evaluate_loss(h, pi, ds, sys, tcfg)
    return TrainResult(h, pi, final, history, ds)


def dump_batch(err: TrainingDiverged) -> str:
    return json.dumps(err.batch)
