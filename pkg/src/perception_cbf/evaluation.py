"""Closed-loop safety evaluation, empirical CBF audits and dataset densities.

Episodes start from the *critical initial set*: states in ``S`` that the
zero controller drives out of ``S`` within ``critical_exit_s`` seconds.  An
episode is unsafe when the closed loop ``x' = f(x, ecm(s(x)))`` leaves ``S``
(or the integrator blows up) before ``horizon_s``.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import neural
from .confset import EstimatorConfig, estimate_batch
from .dynamics import ContractViolation, SystemModel, advance, in_safe_set, n_steps
from .neural import MlpParams
from .synthesis import controller_input

__all__ = [
    "EvalConfig",
    "EvalReport",
    "AuditReport",
    "CriticalSetEmpty",
    "make_ecm",
    "zero_controller",
    "sample_critical_initial",
    "unsafe_ratio",
    "audit_cbf",
    "export_density",
    "density_to_csv",
]

ACCEPTANCE_FLOOR = 1e-4
_CHUNK = 64


class CriticalSetEmpty(ValueError):
    """The zero controller almost never leaves ``S`` fast enough: a configuration error."""


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 500
    horizon_s: float = 10.0
    critical_exit_s: float = 1.0
    seed: int = 0
    max_draws: int = 1_000_000

    def __post_init__(self):
        if self.episodes < 1:
            raise ContractViolation("episodes must be positive")
        if not self.horizon_s > self.critical_exit_s > 0:
            raise ContractViolation("need horizon_s > critical_exit_s > 0")


@dataclass
class EvalReport:
    """Aggregate closed-loop statistics; ``outcomes[k]`` is True for an unsafe episode."""

    unsafe_ratio: float
    episodes: int
    outcomes: list[bool]
    mean_min_margin: float | None = None
    cbf_violation_rate: float | None = None
    exit_steps: list[int | None] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "unsafe_ratio": repr(self.unsafe_ratio),
            "episodes": self.episodes,
            "unsafe_episodes": int(sum(self.outcomes)),
            "mean_min_margin": None if self.mean_min_margin is None else repr(self.mean_min_margin),
            "cbf_violation_rate": None if self.cbf_violation_rate is None else repr(self.cbf_violation_rate),
            "outcomes": ["unsafe" if o else "safe" for o in self.outcomes],
            "exit_steps": self.exit_steps,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1)


@dataclass(frozen=True)
class AuditReport:
    violation_rate: float
    worst_residual: float
    violations: int
    n_queries: int
    inner: int

    def to_json(self) -> dict:
        return {
            "violation_rate": repr(self.violation_rate),
            "worst_residual": repr(self.worst_residual),
            "violations": self.violations,
            "n_queries": self.n_queries,
            "inner": self.inner,
        }


# --------------------------------------------------------------------------


def make_ecm(sys: SystemModel, pi: MlpParams, model=None, ecfg: EstimatorConfig | None = None) -> Callable:
    """The deployed module ``xhat -> pi(center(g(xhat)))``.

    With ``model=None`` the estimator trusts perception, ``g(xhat) = {xhat}``.
    Works on single states and on batches.
    """
    if pi.n_in != sys.n or pi.n_out != sys.m:
        raise ContractViolation(f"controller maps {pi.n_in}->{pi.n_out}, benchmark needs {sys.n}->{sys.m}")
    if model is not None and model.n != sys.n:
        raise ContractViolation(f"GP model has dimension {model.n}, benchmark needs {sys.n}")
    ecfg = ecfg or EstimatorConfig()

    def ecm(xhat):
        xhat = np.asarray(xhat, dtype=float)
        center = xhat if model is None else xhat + model.predict_mean(xhat)
        return neural.forward(pi, controller_input(sys, center))

    return ecm


def zero_controller(sys: SystemModel) -> Callable:
    return lambda xhat: np.zeros(np.shape(xhat)[:-1] + (sys.m,))


def _zero_control_exits(sys: SystemModel, x0: np.ndarray, seconds: float) -> np.ndarray:
    x = np.array(x0, dtype=float)
    u = np.zeros(x.shape[:-1] + (sys.m,))
    out = ~in_safe_set(sys, x)
    for _ in range(n_steps(seconds, sys.dt)):
        x, finite = advance(sys, x, u)
        out |= ~finite | ~in_safe_set(sys, x)
    return out


def _episode_streams(rng: np.random.Generator, episodes: int) -> list[np.random.Generator]:
    base = np.random.SeedSequence(int(rng.integers(0, 2**63)))
    return [np.random.default_rng(s) for s in base.spawn(episodes)]


def sample_critical_initial(sys: SystemModel, cfg: EvalConfig, rng: np.random.Generator) -> np.ndarray:
    """Rejection-sample ``cfg.episodes`` states from the critical initial set.

    Each episode owns its own random stream: candidates are drawn from
    ``Unif(S & X)`` in chunks and the first one whose zero-control rollout
    leaves ``S`` within ``critical_exit_s`` is kept.  The result therefore
    does not depend on how episodes are batched.
    """
    lo, hi = sys.safe_box
    streams = _episode_streams(rng, cfg.episodes)
    out = np.full((cfg.episodes, sys.n), np.nan)
    pending = np.arange(cfg.episodes)
    draws = 0
    while pending.size:
        cand = np.stack([streams[k].uniform(lo, hi, size=(_CHUNK, sys.n)) for k in pending])
        draws += cand.shape[0] * _CHUNK
        hit = _zero_control_exits(sys, cand.reshape(-1, sys.n), cfg.critical_exit_s).reshape(len(pending), _CHUNK)
        got = hit.any(axis=1)
        first = hit.argmax(axis=1)
        out[pending[got]] = cand[got, first[got]]
        pending = pending[~got]
        accepted = cfg.episodes - pending.size
        if pending.size and draws >= cfg.max_draws:
            rate = accepted / draws
            if rate < ACCEPTANCE_FLOOR:
                raise CriticalSetEmpty(f"{sys.name}: critical-set acceptance rate {rate:.2e} after {draws} draws")
            raise CriticalSetEmpty(f"{sys.name}: only {accepted} of {cfg.episodes} critical states in {draws} draws")
    return out


def unsafe_ratio(
    sys: SystemModel,
    ecm: Callable,
    cfg: EvalConfig,
    rng: np.random.Generator | None = None,
    h: MlpParams | None = None,
    alpha_slope: float = 0.1,
    x0: np.ndarray | None = None,
) -> EvalReport:
    """Fraction of critical-set episodes that leave ``S`` within the horizon.

    All episodes are integrated together.  When ``h`` is given, the report
    also carries the mean over safe episodes of ``min_t h(x_t)`` and the
    fraction of visited (state, control) pairs violating
    ``dh/dx . f + alpha h >= 0``.  Leaving the state box ``X`` alone is not
    counted: ``X`` only bounds where states are sampled.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    x = sample_critical_initial(sys, cfg, rng) if x0 is None else np.array(x0, dtype=float)
    E = x.shape[0]
    unsafe = ~in_safe_set(sys, x)
    exit_step = np.where(unsafe, 0, -1)
    min_h = neural.forward(h, x)[:, 0] if h is not None else None
    viol = visits = 0
    for k in range(1, n_steps(cfg.horizon_s, sys.dt) + 1):
        live = ~unsafe
        if not live.any():
            break
        xl = x[live]
        u = np.clip(np.asarray(ecm(sys.s(xl)), dtype=float).reshape(-1, sys.m), sys.control_lo, sys.control_hi)
        if h is not None:
            hv, q, _ = neural.barrier_forward(h, xl, sys.f(xl, u))
            viol += int(np.count_nonzero(q + alpha_slope * hv < 0))
            visits += len(xl)
        xn, finite = advance(sys, xl, u)
        x[live] = xn
        bad = ~finite | ~in_safe_set(sys, xn)
        idx = np.flatnonzero(live)
        unsafe[idx[bad]] = True
        exit_step[idx[bad]] = k
        if h is not None:
            min_h[idx] = np.minimum(min_h[idx], neural.forward(h, xn)[:, 0])
    margin = rate = None
    if h is not None:
        safe = ~unsafe
        margin = float(min_h[safe].mean()) if safe.any() else None
        rate = viol / visits if visits else 0.0
    return EvalReport(
        unsafe_ratio=int(unsafe.sum()) / E,
        episodes=E,
        outcomes=[bool(v) for v in unsafe],
        mean_min_margin=margin,
        cbf_violation_rate=rate,
        exit_steps=[int(s) if s >= 0 else None for s in exit_step],
    )


def audit_cbf(
    sys: SystemModel,
    h: MlpParams,
    pi: MlpParams,
    model,
    n_queries: int,
    rng: np.random.Generator,
    ecfg: EstimatorConfig | None = None,
    inner: int = 64,
    alpha_slope: float = 0.1,
) -> AuditReport:
    """Empirical check of the robust CBF condition on fresh perceived states.

    Inner points are drawn one index at a time across all ellipsoids, so an
    audit with more inner points extends the one with fewer on the same
    stream.
    """
    ecfg = ecfg or EstimatorConfig()
    xhat = sys.sample_states(rng, n_queries)
    if model is None:
        centers = xhat.copy()
        axes = np.full_like(xhat, ecfg.min_semiaxis)
    else:
        centers, axes = estimate_batch(model, ecfg, xhat)
    u = neural.forward(pi, controller_input(sys, centers))
    n = sys.n
    violations = 0
    worst = np.inf
    for _ in range(inner):
        g = rng.standard_normal((n_queries, n))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        r = rng.uniform(size=(n_queries, 1)) ** (1.0 / n)
        xs = sys.project(centers + axes * g * r)
        hv, q, _ = neural.barrier_forward(h, xs, sys.f(xs, u))
        res = q + alpha_slope * hv
        violations += int(np.count_nonzero(res < 0))
        worst = min(worst, float(res.min()))
    total = n_queries * inner
    return AuditReport(violations / total, worst, violations, n_queries, inner)


def export_density(points, dims: tuple[int, int], bins, lo, hi) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """2-D histogram of ``points[:, dims]`` over the box ``[lo, hi]`` of those dims.

    ``bins`` is an int or a pair.  Points on or beyond the box edge fall in
    the outermost bins, so counts always sum to the number of points.
    """
    i, j = dims
    b = (bins, bins) if np.isscalar(bins) else tuple(bins)
    if min(b) < 2:
        raise ContractViolation("need at least 2 bins per axis")
    pts = np.asarray(points, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    a = np.clip(pts[:, i], lo[i], hi[i])
    c = np.clip(pts[:, j], lo[j], hi[j])
    counts, xe, ye = np.histogram2d(a, c, bins=b, range=[[lo[i], hi[i]], [lo[j], hi[j]]])
    return counts.astype(int), xe, ye


def density_to_csv(counts: np.ndarray, xe: np.ndarray, ye: np.ndarray, dims: tuple[int, int]) -> str:
    """CSV matrix (rows follow ``dims[0]``) preceded by ``#`` range comments."""
    buf = io.StringIO()
    buf.write(f"# dims={dims[0]},{dims[1]}\n")
    buf.write(f"# rows: x{dims[0]} in [{float(xe[0])!r}, {float(xe[-1])!r}] with {len(xe) - 1} bins\n")
    buf.write(f"# cols: x{dims[1]} in [{float(ye[0])!r}, {float(ye[-1])!r}] with {len(ye) - 1} bins\n")
    for row in counts:
        buf.write(",".join(str(int(v)) for v in row) + "\n")
    return buf.getvalue()
