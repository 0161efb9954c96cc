"""Tanh multilayer perceptrons for the barrier ``h`` and the controller ``pi``.

The networks are small enough that all derivatives are written out by hand
in batched numpy:

* ``grad_input`` -- reverse mode, ``dh/dx``;
* ``grad_params_output`` -- ordinary backprop of ``upstream . net(x)``;
* ``grad_params_directional`` / ``barrier_backward`` -- forward-over-reverse:
  the directional derivative ``dh/dx . v`` is propagated as a tangent
  alongside the primal pass, and both are then differentiated with respect to
  the weights in one reverse sweep.

Weights follow the ``(out, in)`` layout, inputs are row vectors, so a layer
computes ``x @ W.T + b``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dynamics import ContractViolation

__all__ = [
    "MlpParams",
    "Tape",
    "init_mlp",
    "forward",
    "record",
    "grad_input",
    "grad_params_directional",
    "grad_params_output",
    "barrier_forward",
    "barrier_backward",
]

BARRIER = "barrier"
CONTROLLER = "controller"


@dataclass(frozen=True)
class MlpParams:
    """Weights and biases of a tanh MLP.

    ``head`` is ``"barrier"`` (scalar affine output) or ``"controller"``
    (tanh output rescaled to the box ``[out_lo, out_hi]``).  The same type
    carries parameter-shaped gradients.
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    head: str = BARRIER
    out_lo: np.ndarray | None = None
    out_hi: np.ndarray | None = None
    activation: str = field(default="tanh")

    def __post_init__(self):
        ws = tuple(np.asarray(w, dtype=float) for w in self.weights)
        bs = tuple(np.asarray(b, dtype=float) for b in self.biases)
        if len(ws) != len(bs) or not ws:
            raise ContractViolation("weights and biases must pair up")
        for k, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ContractViolation(f"layer {k}: bad shapes {w.shape}, {b.shape}")
            if k and w.shape[1] != ws[k - 1].shape[0]:
                raise ContractViolation(f"layer {k}: input width does not match previous layer")
        if self.head not in (BARRIER, CONTROLLER):
            raise ContractViolation(f"unknown head {self.head!r}")
        if self.head == BARRIER and ws[-1].shape[0] != 1:
            raise ContractViolation("barrier head must have a scalar output")
        if self.head == CONTROLLER:
            if self.out_lo is None or self.out_hi is None:
                raise ContractViolation("controller head needs output bounds")
            object.__setattr__(self, "out_lo", np.asarray(self.out_lo, dtype=float))
            object.__setattr__(self, "out_hi", np.asarray(self.out_hi, dtype=float))
        if self.activation != "tanh":
            raise ContractViolation("only tanh activations are supported")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[0]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec) -> "MlpParams":
        vec = np.asarray(vec, dtype=float)
        if vec.size != sum(a.size for a in self.arrays()):
            raise ContractViolation("flat vector has the wrong length")
        ws, bs, k = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(vec[k : k + w.size].reshape(w.shape))
            k += w.size
            bs.append(vec[k : k + b.size].copy())
            k += b.size
        return self._replace(ws, bs)

    def _replace(self, ws, bs) -> "MlpParams":
        return MlpParams(tuple(ws), tuple(bs), self.head, self.out_lo, self.out_hi, self.activation)

    def zeros_like(self) -> "MlpParams":
        return self._replace([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])

    def axpy(self, alpha: float, other: "MlpParams") -> "MlpParams":
        """``self + alpha * other``."""
        return self._replace(
            [w + alpha * g for w, g in zip(self.weights, other.weights)],
            [b + alpha * g for b, g in zip(self.biases, other.biases)],
        )

    def __add__(self, other: "MlpParams") -> "MlpParams":
        return self.axpy(1.0, other)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    # -- checkpoint -------------------------------------------------------

    def to_json(self) -> dict:
        obj = {
            "kind": "mlp",
            "head": self.head,
            "activation": self.activation,
            "dims": self.dims,
            "weights": [[_fmt(v) for v in w.ravel()] for w in self.weights],
            "biases": [[_fmt(v) for v in b] for b in self.biases],
        }
        if self.head == CONTROLLER:
            obj["out_lo"] = [_fmt(v) for v in self.out_lo]
            obj["out_hi"] = [_fmt(v) for v in self.out_hi]
        return obj

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1)

    @classmethod
    def from_json(cls, obj: dict) -> "MlpParams":
        if obj.get("kind") != "mlp":
            raise ContractViolation("not an MLP checkpoint")
        dims = obj["dims"]
        ws = [
            np.array([float(v) for v in w], dtype=float).reshape(dims[k + 1], dims[k])
            for k, w in enumerate(obj["weights"])
        ]
        bs = [np.array([float(v) for v in b], dtype=float) for b in obj["biases"]]
        lo = obj.get("out_lo")
        hi = obj.get("out_hi")
        return cls(
            tuple(ws),
            tuple(bs),
            obj["head"],
            None if lo is None else np.array([float(v) for v in lo]),
            None if hi is None else np.array([float(v) for v in hi]),
            obj.get("activation", "tanh"),
        )


def _fmt(v: float) -> str:
    return f"{float(v):.16e}"


def init_mlp(
    n_in: int,
    n_out: int,
    rng: np.random.Generator,
    hidden: tuple[int, ...] = (128, 128),
    head: str = BARRIER,
    out_lo=None,
    out_hi=None,
) -> MlpParams:
    """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` initialisation."""
    dims = [n_in, *hidden, n_out]
    ws, bs = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        ws.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        bs.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpParams(tuple(ws), tuple(bs), head, out_lo, out_hi)


@dataclass
class Tape:
    """Activations of one batched forward pass (and optional tangent pass)."""

    x: np.ndarray
    acts: list[np.ndarray]
    out: np.ndarray
    v: np.ndarray | None = None
    tangents: list[np.ndarray] | None = None
    dz: list[np.ndarray] | None = None
    q: np.ndarray | None = None


def _as_batch(p: MlpParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[-1] != p.n_in:
        raise ContractViolation(f"input dimension {x.shape[-1]} != {p.n_in}")
    return x, single


def record(p: MlpParams, x, v=None) -> Tape:
    """Forward pass keeping every activation; with ``v`` also the tangent ``d/dx . v``."""
    x, _ = _as_batch(p, x)
    acts = [x]
    a = x
    tangents = dz = None
    if v is not None:
        t = np.broadcast_to(np.asarray(v, dtype=float), x.shape)
        tangents, dz = [t], []
    for w, b in zip(p.weights[:-1], p.biases[:-1]):
        a = np.tanh(a @ w.T + b)
        acts.append(a)
        if v is not None:
            zdot = t @ w.T
            t = (1.0 - a * a) * zdot
            dz.append(zdot)
            tangents.append(t)
    out = a @ p.weights[-1].T + p.biases[-1]
    q = None if v is None else t @ p.weights[-1].T
    return Tape(x, acts, out, None if v is None else tangents[0], tangents, dz, q)


def _head(p: MlpParams, out: np.ndarray) -> np.ndarray:
    if p.head == CONTROLLER:
        mid = 0.5 * (p.out_hi + p.out_lo)
        half = 0.5 * (p.out_hi - p.out_lo)
        return mid + half * np.tanh(out)
    return out


def forward(p: MlpParams, x) -> np.ndarray:
    """Network output for one input ``(n,)`` or a batch ``(B, n)``."""
    xb, single = _as_batch(p, x)
    y = _head(p, record(p, xb).out)
    if not np.all(np.isfinite(y)):
        raise ContractViolation("non-finite network output")
    return y[0] if single else y


def barrier_forward(p: MlpParams, x, v) -> tuple[np.ndarray, np.ndarray, Tape]:
    """``h(x)`` and ``dh/dx(x) . v`` for a batch, plus the tape for ``barrier_backward``."""
    tape = record(p, x, v)
    return tape.out[:, 0], tape.q[:, 0], tape


def _backprop(p: MlpParams, tape: Tape, out_bar: np.ndarray, q_bar: np.ndarray | None):
    """Reverse sweep through primal (and tangent) activations.

    Returns the parameter gradient and the adjoints of ``x`` and ``v``.
    """
    L = len(p.weights)
    gw = [None] * L
    gb = [None] * L
    a_prev = tape.acts[-1]
    gw[-1] = out_bar.T @ a_prev
    gb[-1] = out_bar.sum(0)
    A = out_bar @ p.weights[-1]
    if q_bar is not None:
        gw[-1] = gw[-1] + q_bar.T @ tape.tangents[-1]
        Adot = q_bar @ p.weights[-1]
    for k in range(L - 2, -1, -1):
        a = tape.acts[k + 1]
        d = 1.0 - a * a
        if q_bar is not None:
            # the tangent (1 - a^2) * zdot also depends on z through a
            zbar = d * (A - 2.0 * a * tape.dz[k] * Adot)
            zdot_bar = d * Adot
            gw[k] = zbar.T @ tape.acts[k] + zdot_bar.T @ tape.tangents[k]
            Adot = zdot_bar @ p.weights[k]
        else:
            zbar = d * A
            gw[k] = zbar.T @ tape.acts[k]
        gb[k] = zbar.sum(0)
        A = zbar @ p.weights[k]
    grad = p._replace(gw, gb)
    return grad, A, (Adot if q_bar is not None else None)


def barrier_backward(p: MlpParams, tape: Tape, h_bar, q_bar) -> tuple[MlpParams, np.ndarray]:
    """Gradient of ``sum_b h_bar[b] h(x_b) + q_bar[b] (dh/dx(x_b) . v_b)``.

    Returns the parameter gradient and the per-sample adjoint of ``v``, which
    equals ``q_bar[b] * dh/dx(x_b)``.
    """
    h_bar = np.asarray(h_bar, dtype=float).reshape(-1, 1) * np.ones((tape.x.shape[0], 1))
    q_bar = np.asarray(q_bar, dtype=float).reshape(-1, 1) * np.ones((tape.x.shape[0], 1))
    grad, _, v_bar = _backprop(p, tape, h_bar, q_bar)
    return grad, v_bar


def grad_input(p: MlpParams, x) -> np.ndarray:
    """Exact ``dh/dx`` of a barrier network."""
    if p.head != BARRIER:
        raise ContractViolation("grad_input expects a barrier network")
    xb, single = _as_batch(p, x)
    tape = record(p, xb)
    _, gx, _ = _backprop(p, tape, np.ones((xb.shape[0], 1)), None)
    return gx[0] if single else gx


def grad_params_directional(p: MlpParams, x, v) -> MlpParams:
    """Parameter gradient of ``dh/dx(x; theta) . v`` with ``v`` held fixed.

    Batched inputs sum the per-sample gradients.
    """
    if p.head != BARRIER:
        raise ContractViolation("grad_params_directional expects a barrier network")
    xb, _ = _as_batch(p, x)
    v = np.broadcast_to(np.asarray(v, dtype=float), xb.shape)
    tape = record(p, xb, v)
    grad, _ = barrier_backward(p, tape, 0.0, 1.0)
    return grad


def grad_params_output(p: MlpParams, x, upstream) -> MlpParams:
    """Parameter gradient of ``upstream . forward(p, x)`` (summed over a batch)."""
    xb, _ = _as_batch(p, x)
    up = np.broadcast_to(np.asarray(upstream, dtype=float), (xb.shape[0], p.n_out))
    tape = record(p, xb)
    if p.head == CONTROLLER:
        half = 0.5 * (p.out_hi - p.out_lo)
        th = np.tanh(tape.out)
        out_bar = up * half * (1.0 - th * th)
    else:
        out_bar = np.array(up)
    grad, _, _ = _backprop(p, tape, out_bar, None)
    return grad
