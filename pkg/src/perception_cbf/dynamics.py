"""Benchmark dynamical systems, synthetic perception functions and RK4 rollouts.

Every function in this module accepts a single state of shape ``(n,)`` or a
batch of states of shape ``(..., n)``; controls broadcast the same way.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import solve_continuous_are

__all__ = [
    "SystemModel",
    "Trajectory",
    "IntegrationBlowup",
    "ContractViolation",
    "dubins",
    "cartpole",
    "lanekeep",
    "toy",
    "get_system",
    "BENCHMARKS",
    "vector_field",
    "control_jacobian",
    "perceive",
    "integrate_step",
    "advance",
    "rollout",
    "n_steps",
    "lqr_gain",
    "in_safe_set",
    "trajectory_to_csv",
]


class ContractViolation(ValueError):
    """Raised when an argument breaks an operation's precondition."""


class IntegrationBlowup(FloatingPointError):
    """Raised when an integration step produces non-finite values."""


@dataclass(frozen=True)
class SystemModel:
    """A benchmark plant with its perception function and safe set.

    ``safe_lo``/``safe_hi`` describe the open box ``S``; components that the
    safe set does not constrain are ``-inf``/``inf``.  ``wrap`` lists state
    indices that are angles wrapped into ``[-pi, pi)`` after every step, and
    ``saturate`` lists indices clamped to the state box (physical speed
    limits).  ``nominal`` is a hand-designed state-feedback law used only to
    initialise the learned controller.
    """

    name: str
    state_lo: np.ndarray
    state_hi: np.ndarray
    control_lo: np.ndarray
    control_hi: np.ndarray
    safe_lo: np.ndarray
    safe_hi: np.ndarray
    dt: float
    f: Callable[[np.ndarray, np.ndarray], np.ndarray] = field(repr=False)
    dfdu: Callable[[np.ndarray, np.ndarray], np.ndarray] = field(repr=False)
    s: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    wrap: tuple[int, ...] = ()
    saturate: tuple[int, ...] = ()
    state_names: tuple[str, ...] = ()
    nominal: Callable[[np.ndarray], np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("state_lo", "state_hi", "control_lo", "control_hi", "safe_lo", "safe_hi"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.dt <= 0:
            raise ContractViolation("dt must be positive")
        if np.any(self.control_lo >= self.control_hi):
            raise ContractViolation("control box must be nonempty")
        lo = np.maximum(self.safe_lo, self.state_lo)
        hi = np.minimum(self.safe_hi, self.state_hi)
        if np.any(lo > hi):
            raise ContractViolation("safe set must lie inside the state box")

    @property
    def n(self) -> int:
        return self.state_lo.shape[0]

    @property
    def m(self) -> int:
        return self.control_lo.shape[0]

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.state_hi - self.state_lo))

    @property
    def safe_box(self) -> tuple[np.ndarray, np.ndarray]:
        """The safe set intersected with the state box (finite bounds)."""
        return np.maximum(self.safe_lo, self.state_lo), np.minimum(self.safe_hi, self.state_hi)

    def project(self, x: np.ndarray) -> np.ndarray:
        """Map states back onto ``X``: wrap angles, clip every other component."""
        x = np.asarray(x, dtype=float)
        out = np.clip(x, self.state_lo, self.state_hi)
        for i in self.wrap:
            out[..., i] = _wrap_angle(x[..., i])
        return out

    def in_state_box(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.state_lo) & (x <= self.state_hi), axis=-1)

    def sample_states(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.uniform(self.state_lo, self.state_hi, size=(size, self.n))


def _wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


def _check_dims(sys: SystemModel, x, u=None):
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (sys.n,):
        raise ContractViolation(f"{sys.name}: state must have dimension {sys.n}, got {x.shape}")
    if u is None:
        return x
    u = np.asarray(u, dtype=float)
    if u.shape[-1:] != (sys.m,):
        raise ContractViolation(f"{sys.name}: control must have dimension {sys.m}, got {u.shape}")
    return x, u


def lqr_gain(f, dfdu, n: int, m: int, Q, R, eps: float = 1e-6) -> np.ndarray:
    """Continuous-time LQR gain ``K`` (``u = -K x``) of ``f`` linearised at the origin."""
    x0 = np.zeros(n)
    u0 = np.zeros(m)
    A = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = eps
        A[:, i] = (f(x0 + e, u0) - f(x0 - e, u0)) / (2.0 * eps)
    B = dfdu(x0, u0)
    P = solve_continuous_are(A, B, Q, R)
    return np.linalg.solve(R, B.T @ P)


def _linear_feedback(K, lo, hi):
    def law(x):
        return np.clip(-(np.asarray(x, dtype=float) @ K.T), lo, hi)

    return law


# --------------------------------------------------------------------------
# Dubins vehicle: state (px, py, theta, v), control (turn rate, acceleration)


def _dubins_f(x, u):
    th, v = x[..., 2], x[..., 3]
    return np.stack([v * np.cos(th), v * np.sin(th), u[..., 0] * np.ones_like(th), u[..., 1] * np.ones_like(th)], axis=-1)


def _dubins_dfdu(x, u):
    jac = np.zeros(x.shape[:-1] + (4, 2))
    jac[..., 2, 0] = 1.0
    jac[..., 3, 1] = 1.0
    return jac


def _dubins_s(x):
    xh = np.array(x, dtype=float, copy=True)
    xh[..., 2] = x[..., 2] + np.sin(x[..., 0] + x[..., 1])
    return xh


DUBINS_TURN_RATE = 10.0
DUBINS_ACCEL = 2.0


def _dubins_nominal(x):
    # turn toward the origin only once the heading is more than 1 rad off it, braking throughout
    x = np.asarray(x, dtype=float)
    bearing = np.arctan2(-x[..., 1], -x[..., 0])
    d = _wrap_angle(bearing - x[..., 2])
    turn = np.sign(d) * np.clip(20.0 * (np.abs(d) - 1.0), 0.0, DUBINS_TURN_RATE)
    return np.stack([turn, np.full_like(turn, -DUBINS_ACCEL)], axis=-1)


def dubins(dt: float = 0.01) -> SystemModel:
    """Dubins vehicle with a heading-only perception error."""
    return SystemModel(
        name="dubins",
        state_lo=np.array([-3.0, -3.0, -np.pi, 0.5]),
        state_hi=np.array([3.0, 3.0, np.pi, 2.0]),
        control_lo=np.array([-DUBINS_TURN_RATE, -DUBINS_ACCEL]),
        control_hi=np.array([DUBINS_TURN_RATE, DUBINS_ACCEL]),
        safe_lo=np.array([-2.0, -2.0, -np.inf, -np.inf]),
        safe_hi=np.array([2.0, 2.0, np.inf, np.inf]),
        dt=dt,
        f=_dubins_f,
        dfdu=_dubins_dfdu,
        s=_dubins_s,
        wrap=(2,),
        saturate=(3,),
        state_names=("px", "py", "theta", "v"),
        nominal=_dubins_nominal,
    )


# --------------------------------------------------------------------------
# Cart-pole (frictionless Barto-Sutton-Anderson): state (p, v, theta, omega)

CART_MASS = 1.0
POLE_MASS = 0.1
HALF_LENGTH = 0.5
GRAVITY = 9.8


def _cartpole_terms(x):
    th, om = x[..., 2], x[..., 3]
    total = CART_MASS + POLE_MASS
    sin, cos = np.sin(th), np.cos(th)
    denom = HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos**2 / total)
    return sin, cos, om, total, denom


def _cartpole_f(x, u):
    sin, cos, om, total, denom = _cartpole_terms(x)
    force = u[..., 0]
    temp = (force + POLE_MASS * HALF_LENGTH * om**2 * sin) / total
    th_acc = (GRAVITY * sin - cos * temp) / denom
    x_acc = temp - POLE_MASS * HALF_LENGTH * th_acc * cos / total
    return np.stack([x[..., 1] * np.ones_like(th_acc), x_acc, om * np.ones_like(th_acc), th_acc], axis=-1)


def _cartpole_dfdu(x, u):
    _, cos, _, total, denom = _cartpole_terms(x)
    dth = -cos / (total * denom)
    dx = 1.0 / total - POLE_MASS * HALF_LENGTH * dth * cos / total
    jac = np.zeros(np.shape(cos) + (4, 1))
    jac[..., 1, 0] = dx
    jac[..., 3, 0] = dth
    return jac


def _cartpole_s(x):
    xh = np.array(x, dtype=float, copy=True)
    phase = 2.0 * x[..., 0] + 4.0 * x[..., 2]
    xh[..., 1] = x[..., 1] + np.sin(phase)
    xh[..., 3] = x[..., 3] + np.cos(phase)
    return xh


CARTPOLE_FORCE = 10.0


def cartpole(dt: float = 0.01) -> SystemModel:
    """Cart-pole with velocity and angular-rate perception errors."""
    lo = np.array([-CARTPOLE_FORCE])
    hi = np.array([CARTPOLE_FORCE])
    gain = lqr_gain(_cartpole_f, _cartpole_dfdu, 4, 1, np.diag([1.0, 30.0, 30.0, 30.0]), 0.01 * np.eye(1))
    return SystemModel(
        name="cartpole",
        state_lo=np.array([-4.0, -0.5, -np.pi / 3, -0.5]),
        state_hi=np.array([4.0, 0.5, np.pi / 3, 0.5]),
        control_lo=lo,
        control_hi=hi,
        safe_lo=np.array([-3.0, -np.inf, -np.pi / 6, -np.inf]),
        safe_hi=np.array([3.0, np.inf, np.pi / 6, np.inf]),
        dt=dt,
        f=_cartpole_f,
        dfdu=_cartpole_dfdu,
        s=_cartpole_s,
        state_names=("p", "v", "theta", "omega"),
        nominal=_linear_feedback(gain, lo, hi),
    )


# --------------------------------------------------------------------------
# Kinematic lane keeping at constant speed: state (p, theta), control turn rate

LANE_SPEED = 5.0


def _lanekeep_f(x, u):
    return np.stack([LANE_SPEED * np.sin(x[..., 1]), u[..., 0] * np.ones_like(x[..., 1])], axis=-1)


def _lanekeep_dfdu(x, u):
    jac = np.zeros(x.shape[:-1] + (2, 1))
    jac[..., 1, 0] = 1.0
    return jac


def _lanekeep_s(x):
    p, th = x[..., 0], x[..., 1]
    return np.stack([p + 0.5 * np.sin(3.0 * th), th + 0.2 * np.sin(2.0 * p)], axis=-1)


def lanekeep(dt: float = 0.01) -> SystemModel:
    """Kinematic lane keeping with a smooth synthetic perception error."""
    gain = lqr_gain(_lanekeep_f, _lanekeep_dfdu, 2, 1, np.eye(2), np.eye(1))
    return SystemModel(
        name="lanekeep",
        state_lo=np.array([-5.0, -np.pi / 4]),
        state_hi=np.array([5.0, np.pi / 4]),
        control_lo=np.array([-1.0]),
        control_hi=np.array([1.0]),
        safe_lo=np.array([-3.5, -np.inf]),
        safe_hi=np.array([3.5, np.inf]),
        dt=dt,
        f=_lanekeep_f,
        dfdu=_lanekeep_dfdu,
        s=_lanekeep_s,
        state_names=("p", "theta"),
        nominal=_linear_feedback(gain, np.array([-1.0]), np.array([1.0])),
    )


# --------------------------------------------------------------------------
# Scalar test plant x' = x + u with exact perception


def _toy_f(x, u):
    return x + u


def _toy_dfdu(x, u):
    return np.ones(x.shape[:-1] + (1, 1))


def _toy_s(x):
    return np.array(x, dtype=float, copy=True)


def toy(dt: float = 0.01) -> SystemModel:
    """Unstable scalar plant with perfect perception, for smoke tests.

    The zero controller exits ``S = (-1, 1)`` within a second from any
    ``|x0| > exp(-1)``; ``u = -2 x`` contracts.
    """
    return SystemModel(
        name="toy",
        state_lo=np.array([-1.0]),
        state_hi=np.array([1.0]),
        control_lo=np.array([-3.0]),
        control_hi=np.array([3.0]),
        safe_lo=np.array([-1.0]),
        safe_hi=np.array([1.0]),
        dt=dt,
        f=_toy_f,
        dfdu=_toy_dfdu,
        s=_toy_s,
        state_names=("x",),
        nominal=_linear_feedback(np.array([[2.0]]), np.array([-3.0]), np.array([3.0])),
    )


BENCHMARKS = ("dubins", "cartpole", "lanekeep")
_FACTORIES = {"dubins": dubins, "cartpole": cartpole, "lanekeep": lanekeep, "toy": toy}


def get_system(name: str, dt: float = 0.01) -> SystemModel:
    try:
        return _FACTORIES[name.lower()](dt)
    except KeyError:
        raise ContractViolation(f"unknown benchmark {name!r}; choose from {sorted(_FACTORIES)}") from None


# --------------------------------------------------------------------------


def vector_field(sys: SystemModel, x, u) -> np.ndarray:
    """Evaluate ``f(x, u)``."""
    x, u = _check_dims(sys, x, u)
    return sys.f(x, u)


def control_jacobian(sys: SystemModel, x, u) -> np.ndarray:
    """Jacobian ``df/du`` with shape ``(..., n, m)``."""
    x, u = _check_dims(sys, x, u)
    return sys.dfdu(x, u)


def perceive(sys: SystemModel, x) -> np.ndarray:
    """Run the perception function: the perceived state ``s(x)``."""
    return sys.s(_check_dims(sys, x))


def in_safe_set(sys: SystemModel, x) -> np.ndarray | bool:
    """Membership in the open safe box ``S``."""
    x = _check_dims(sys, x)
    inside = np.all((x > sys.safe_lo) & (x < sys.safe_hi), axis=-1)
    return bool(inside) if inside.ndim == 0 else inside


def _rk4(sys: SystemModel, x, u, h):
    k1 = sys.f(x, u)
    k2 = sys.f(x + 0.5 * h * k1, u)
    k3 = sys.f(x + 0.5 * h * k2, u)
    k4 = sys.f(x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _post_step(sys: SystemModel, out):
    for i in sys.wrap:
        out[..., i] = _wrap_angle(out[..., i])
    for i in sys.saturate:
        out[..., i] = np.clip(out[..., i], sys.state_lo[i], sys.state_hi[i])
    return out


def integrate_step(sys: SystemModel, x, u, dt: float | None = None) -> np.ndarray:
    """One classical RK4 step under zero-order-hold control.

    Angles listed in ``sys.wrap`` are wrapped and the ``sys.saturate``
    components are clamped to the state box after the step.
    """
    x, u = _check_dims(sys, x, u)
    out = _rk4(sys, x, u, sys.dt if dt is None else dt)
    if not np.all(np.isfinite(out)):
        raise IntegrationBlowup(f"{sys.name}: non-finite state after RK4 step")
    return _post_step(sys, out)


def advance(sys: SystemModel, x, u) -> tuple[np.ndarray, np.ndarray]:
    """Batched RK4 step that flags rather than raises on blowups.

    Returns ``(x_next, finite)``; rows that went non-finite keep their
    previous state.
    """
    x, u = _check_dims(sys, x, u)
    with np.errstate(all="ignore"):
        out = _rk4(sys, x, u, sys.dt)
    finite = np.all(np.isfinite(out), axis=-1)
    out = np.where(finite[..., None], out, x)
    return _post_step(sys, out), finite


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    exited_state_box: bool = False

    def __post_init__(self):
        if len(self.states) != len(self.times) or len(self.controls) != len(self.times) - 1:
            raise ContractViolation("inconsistent trajectory lengths")


def n_steps(horizon_s: float, dt: float) -> int:
    # tolerate float noise such as 1.0 / 0.01 = 100.00000000000001
    return max(1, math.ceil(horizon_s / dt - 1e-9))


def rollout(sys: SystemModel, x0, policy: Callable[[np.ndarray], np.ndarray], horizon_s: float) -> Trajectory:
    """Simulate the closed loop ``x' = f(x, policy(x))`` for ``horizon_s`` seconds.

    ``policy`` receives the *actual* state; callers that model imperfect
    perception compose ``perceive`` themselves.  The run stops early if the
    state leaves the state box ``X``.
    """
    if horizon_s <= 0:
        raise ContractViolation("horizon_s must be positive")
    x = _check_dims(sys, x0).copy()
    steps = n_steps(horizon_s, sys.dt)
    states, controls = [x], []
    exited = False
    for _ in range(steps):
        u = np.clip(np.asarray(policy(x), dtype=float), sys.control_lo, sys.control_hi)
        x = integrate_step(sys, x, u)
        controls.append(u)
        states.append(x)
        if not sys.in_state_box(x):
            exited = True
            break
    times = sys.dt * np.arange(len(states))
    return Trajectory(times, np.array(states), np.array(controls).reshape(-1, sys.m), exited)


def trajectory_to_csv(traj: Trajectory) -> str:
    """Serialise a trajectory as ``t,x0..,u0..`` rows; the last row has blank controls."""
    n = traj.states.shape[1]
    m = traj.controls.shape[1] if traj.controls.size else 0
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["t"] + [f"x{i}" for i in range(n)] + [f"u{j}" for j in range(m)])
    for k, t in enumerate(traj.times):
        ctrl = [repr(float(c)) for c in traj.controls[k]] if k < len(traj.controls) else [""] * m
        writer.writerow([repr(float(t))] + [repr(float(s)) for s in traj.states[k]] + ctrl)
    return buf.getvalue()
