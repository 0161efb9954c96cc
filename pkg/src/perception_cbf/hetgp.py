"""Heteroscedastic Gaussian-process regression of perception errors.

Each output dimension ``i`` gets two independent GPs over the perceived
state: a zero-mean GP for the error ``r_i`` and a second GP for the log
noise standard deviation ``z_i``.  Noise levels are learned with the
"most likely heteroscedastic GP" EM scheme: fit a homoscedastic GP, read off
empirical noise at the training inputs by sampling the posterior, regress the
log noise with a second GP, then refit the first GP with the learned noise
on its diagonal.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

__all__ = [
    "KernelParams",
    "PerceptionDataset",
    "HetGPModel",
    "DimGP",
    "FitFailure",
    "InsufficientData",
    "kernel_eval",
    "kernel_matrix",
    "log_marginal_likelihood",
    "fit_homoscedastic",
    "fit_heteroscedastic",
    "predict_error",
]

LENGTHSCALE_BOUNDS = (1e-3, 1e3)
SIGNAL_BOUNDS = (1e-8, 1e4)
NOISE_BOUNDS = (1e-10, 1e4)
JITTER_LADDER = (0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)
DUPLICATE_TOL = 1e-9
VARIANCE_FLOOR = 1e-12
_MAX_LOG_STEP = 0.5
# -E[log chi2_1]; removes the downward bias of regressing log squared residuals
LOG_CHI2_BIAS = 1.2703628454614782


class FitFailure(RuntimeError):
    """Covariance stayed non-positive-definite after the jitter ladder."""


class InsufficientData(ValueError):
    pass


@dataclass(frozen=True)
class KernelParams:
    """Squared-exponential ARD kernel ``sv * exp(-0.5 * sum(((a-b)/l)**2))``."""

    signal_variance: float
    lengthscales: np.ndarray

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float)).copy()
        if self.signal_variance <= 0 or np.any(ls <= 0):
            raise ValueError("kernel parameters must be strictly positive")
        ls = np.clip(ls, *LENGTHSCALE_BOUNDS)
        ls.setflags(write=False)
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "signal_variance", float(self.signal_variance))

    def to_log(self) -> np.ndarray:
        return np.concatenate([[np.log(self.signal_variance)], np.log(self.lengthscales)])

    @classmethod
    def from_log(cls, theta) -> "KernelParams":
        return cls(float(np.exp(theta[0])), np.exp(np.asarray(theta[1:])))


def kernel_matrix(p: KernelParams, a, b) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float)) / p.lengthscales
    b = np.atleast_2d(np.asarray(b, dtype=float)) / p.lengthscales
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return p.signal_variance * np.exp(-0.5 * np.maximum(sq, 0.0))


def kernel_eval(p: KernelParams, a, b) -> float:
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if a.shape != b.shape or a.shape != p.lengthscales.shape:
        raise ValueError("dimension mismatch in kernel_eval")
    r = (a - b) / p.lengthscales
    return float(p.signal_variance * np.exp(-0.5 * r @ r))


def _sq_dists_per_dim(X: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - X[None, :, :]
    return np.moveaxis(diff * diff, -1, 0)


def _cholesky(A: np.ndarray) -> tuple[np.ndarray, float]:
    eye = np.eye(A.shape[0])
    for jitter in JITTER_LADDER:
        try:
            return np.linalg.cholesky(A + jitter * eye), jitter
        except np.linalg.LinAlgError:
            continue
    raise FitFailure("covariance not positive definite after jitter escalation")


# --------------------------------------------------------------------------
# Dataset


@dataclass(frozen=True)
class PerceptionDataset:
    """Pairs of (perceived state, actual state); errors are ``x - xhat``.

    Pairs whose perceived states coincide within ``1e-9`` are merged on
    construction by averaging their actual states.
    """

    xhat: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        xhat = np.atleast_2d(np.asarray(self.xhat, dtype=float))
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        if xhat.shape != x.shape:
            raise ValueError("perceived and actual states must have the same shape")
        xhat, x = _merge_duplicates(xhat, x)
        xhat.setflags(write=False)
        x.setflags(write=False)
        object.__setattr__(self, "xhat", xhat)
        object.__setattr__(self, "x", x)

    def __len__(self) -> int:
        return self.xhat.shape[0]

    @property
    def n(self) -> int:
        return self.xhat.shape[1]

    @property
    def errors(self) -> np.ndarray:
        return self.x - self.xhat

    def extend(self, xhat, x) -> "PerceptionDataset":
        xhat = np.asarray(xhat, dtype=float).reshape(-1, self.n)
        x = np.asarray(x, dtype=float).reshape(-1, self.n)
        return PerceptionDataset(np.vstack([self.xhat, xhat]), np.vstack([self.x, x]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"xhat{i}" for i in range(self.n)] + [f"x{i}" for i in range(self.n)])
        for a, b in zip(self.xhat, self.x):
            w.writerow([_fmt(v) for v in a] + [_fmt(v) for v in b])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "PerceptionDataset":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], [r for r in rows[1:] if r]
        n = len(header) // 2
        if header != [f"xhat{i}" for i in range(n)] + [f"x{i}" for i in range(n)]:
            raise ValueError(f"unexpected dataset header {header}")
        arr = np.array([[float(v) for v in r] for r in body], dtype=float).reshape(-1, 2 * n)
        return cls(arr[:, :n], arr[:, n:])


def _merge_duplicates(xhat: np.ndarray, x: np.ndarray):
    if len(xhat) < 2:
        return xhat.copy(), x.copy()
    keys = np.round(xhat / DUPLICATE_TOL).astype(np.int64) if np.all(np.abs(xhat) < 9e9) else None
    if keys is None:
        return xhat.copy(), x.copy()
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.ravel()
    if len(first) == len(xhat):
        return xhat.copy(), x.copy()
    # keep groups in order of first appearance
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    group = rank[inverse]
    counts = np.bincount(group)
    xs = np.zeros((len(first), x.shape[1]))
    np.add.at(xs, group, x)
    return xhat[np.sort(first)].copy(), xs / counts[:, None]


def _fmt(v: float) -> str:
    return f"{float(v):.16e}"


# --------------------------------------------------------------------------
# Homoscedastic GP


def log_marginal_likelihood(p: KernelParams, X, y, noise) -> float:
    """Log evidence of ``y`` under a zero-mean GP; ``noise`` is a scalar or per-point variance."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    K = kernel_matrix(p, X, X) + np.diag(np.broadcast_to(noise, y.shape))
    L, _ = _cholesky(K)
    alpha = cho_solve((L, True), y)
    return float(-0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * len(y) * np.log(2 * np.pi))


def _lml_and_grad(theta, sq, y, fixed_noise):
    """LML and its gradient with respect to log hyperparameters.

    ``theta`` is ``[log sv, log l_1..l_d]`` followed by ``log noise`` when
    ``fixed_noise`` is None.
    """
    d = sq.shape[0]
    sv = np.exp(theta[0])
    ls = np.exp(theta[1 : 1 + d])
    Kf = sv * np.exp(-0.5 * np.tensordot(1.0 / ls**2, sq, axes=1))
    noise = np.exp(theta[-1]) if fixed_noise is None else fixed_noise
    K = Kf + np.diag(np.broadcast_to(noise, y.shape))
    L, _ = _cholesky(K)
    alpha = cho_solve((L, True), y)
    lml = -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * len(y) * np.log(2 * np.pi)
    Linv = solve_triangular(L, np.eye(len(y)), lower=True)
    W = np.outer(alpha, alpha) - Linv.T @ Linv
    grad = np.empty_like(theta)
    grad[0] = 0.5 * np.sum(W * Kf)
    WK = W * Kf
    for k in range(d):
        grad[1 + k] = 0.5 * np.sum(WK * sq[k]) / ls[k] ** 2
    if fixed_noise is None:
        grad[-1] = 0.5 * np.trace(W) * noise
    return float(lml), grad


def _clip_theta(theta, d, with_noise):
    lo = [np.log(SIGNAL_BOUNDS[0])] + [np.log(LENGTHSCALE_BOUNDS[0])] * d
    hi = [np.log(SIGNAL_BOUNDS[1])] + [np.log(LENGTHSCALE_BOUNDS[1])] * d
    if with_noise:
        lo.append(np.log(NOISE_BOUNDS[0]))
        hi.append(np.log(NOISE_BOUNDS[1]))
    return np.clip(theta, lo, hi)


def _ascend(theta, sq, y, fixed_noise, iterations, step):
    """Fixed-step gradient ascent on log hyperparameters, keeping the best iterate."""
    d = sq.shape[0]
    with_noise = fixed_noise is None
    theta = _clip_theta(np.asarray(theta, dtype=float), d, with_noise)
    best_lml, grad = _lml_and_grad(theta, sq, y, fixed_noise)
    best = theta.copy()
    for _ in range(iterations):
        delta = np.clip(step * grad, -_MAX_LOG_STEP, _MAX_LOG_STEP)
        trial = _clip_theta(theta + delta, d, with_noise)
        try:
            lml, g = _lml_and_grad(trial, sq, y, fixed_noise)
        except FitFailure:
            break
        if not np.isfinite(lml):
            break
        theta, grad = trial, g
        if lml > best_lml:
            best_lml, best = lml, trial.copy()
    return best, best_lml


def fit_homoscedastic(
    X,
    y,
    init: KernelParams,
    noise_var: float = 1e-2,
    iterations: int = 200,
    step: float = 0.01,
) -> tuple[KernelParams, float]:
    """Maximise the log marginal likelihood of a zero-mean GP with scalar noise.

    Returns the fitted kernel and the fitted noise variance.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if len(y) < 2:
        raise InsufficientData("need at least two observations")
    theta0 = np.concatenate([init.to_log(), [np.log(noise_var)]])
    theta, _ = _ascend(theta0, _sq_dists_per_dim(X), y, None, iterations, step)
    return KernelParams.from_log(theta[:-1]), float(np.exp(theta[-1]))


# --------------------------------------------------------------------------
# Heteroscedastic GP


@dataclass
class _Posterior:
    """Cached Cholesky factor and weights of a GP conditioned on data."""

    kernel: KernelParams
    X: np.ndarray
    y: np.ndarray
    noise: np.ndarray
    L: np.ndarray = field(init=False, repr=False)
    alpha: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        K = kernel_matrix(self.kernel, self.X, self.X) + np.diag(self.noise)
        self.L, self.jitter = _cholesky(K)
        self.alpha = cho_solve((self.L, True), self.y)

    def mean(self, Xq) -> np.ndarray:
        if not self.alpha.any():
            return np.zeros(len(Xq))
        return kernel_matrix(self.kernel, Xq, self.X) @ self.alpha

    def mean_var(self, Xq) -> tuple[np.ndarray, np.ndarray]:
        Ks = kernel_matrix(self.kernel, Xq, self.X)
        v = solve_triangular(self.L, Ks.T, lower=True)
        return Ks @ self.alpha, self.kernel.signal_variance - (v * v).sum(0)


@dataclass
class DimGP:
    """The error GP and log-noise GP for one output dimension."""

    kernel: KernelParams
    noise_kernel: KernelParams
    noise_gp_var: float
    noise_offset: float
    X: np.ndarray
    y: np.ndarray
    log_noise_targets: np.ndarray
    z_train: np.ndarray = field(init=False)

    def __post_init__(self):
        self._zgp = _Posterior(
            self.noise_kernel,
            self.X,
            self.log_noise_targets - self.noise_offset,
            np.full(len(self.y), self.noise_gp_var),
        )
        self.z_train = self.log_noise(self.X)
        self._gp = _Posterior(self.kernel, self.X, self.y, np.exp(2.0 * self.z_train))

    def log_noise(self, Xq) -> np.ndarray:
        return self.noise_offset + self._zgp.mean(Xq)

    @property
    def factor(self) -> np.ndarray:
        return self._gp.L

    def covariance(self) -> np.ndarray:
        return kernel_matrix(self.kernel, self.X, self.X) + np.diag(np.exp(2.0 * self.z_train))

    def predict(self, Xq) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Mean, latent variance and log noise std at the query points."""
        mu, var = self._gp.mean_var(Xq)
        return mu, var, self.log_noise(Xq)

    def to_json(self) -> dict:
        return {
            "kernel": _kernel_json(self.kernel),
            "noise_kernel": _kernel_json(self.noise_kernel),
            "noise_gp_var": _fmt(self.noise_gp_var),
            "noise_offset": _fmt(self.noise_offset),
            "targets": [_fmt(v) for v in self.y],
            "log_noise_targets": [_fmt(v) for v in self.log_noise_targets],
            "log_noise_train": [_fmt(v) for v in self.z_train],
        }

    @classmethod
    def from_json(cls, obj: dict, X: np.ndarray) -> "DimGP":
        return cls(
            kernel=_kernel_from_json(obj["kernel"]),
            noise_kernel=_kernel_from_json(obj["noise_kernel"]),
            noise_gp_var=float(obj["noise_gp_var"]),
            noise_offset=float(obj["noise_offset"]),
            X=X,
            y=np.array([float(v) for v in obj["targets"]]),
            log_noise_targets=np.array([float(v) for v in obj["log_noise_targets"]]),
        )


def _kernel_json(p: KernelParams) -> dict:
    return {"signal_variance": _fmt(p.signal_variance), "lengthscales": [_fmt(v) for v in p.lengthscales]}


def _kernel_from_json(obj: dict) -> KernelParams:
    return KernelParams(float(obj["signal_variance"]), np.array([float(v) for v in obj["lengthscales"]]))


@dataclass
class HetGPModel:
    """Per-dimension heteroscedastic GPs mapping perceived states to errors.

    ``diagnostics["variance_clamps"]`` counts predictions whose variance had
    to be clamped to a small positive floor.
    """

    dims: list[DimGP]
    X: np.ndarray
    diagnostics: dict = field(default_factory=lambda: {"variance_clamps": 0})

    def __post_init__(self):
        if len(self.dims) != self.X.shape[1]:
            raise ValueError(f"{len(self.dims)} output GPs for {self.X.shape[1]}-dimensional inputs")

    @property
    def n(self) -> int:
        return self.X.shape[1]

    def __len__(self) -> int:
        return self.X.shape[0]

    def predict(self, xq) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and standard deviation of the error, shape ``(..., n)``."""
        xq = np.asarray(xq, dtype=float)
        flat = xq.reshape(-1, self.n)
        mean = np.empty_like(flat)
        var = np.empty_like(flat)
        for i, gp in enumerate(self.dims):
            mu, lat, z = gp.predict(flat)
            mean[:, i] = mu
            var[:, i] = lat + np.exp(2.0 * z)
        bad = var < VARIANCE_FLOOR
        if bad.any():
            self.diagnostics["variance_clamps"] += int(bad.sum())
            var[bad] = VARIANCE_FLOOR
        return mean.reshape(xq.shape), np.sqrt(var).reshape(xq.shape)

    def predict_mean(self, xq) -> np.ndarray:
        xq = np.asarray(xq, dtype=float)
        flat = xq.reshape(-1, self.n)
        out = np.column_stack([gp._gp.mean(flat) for gp in self.dims])
        return out.reshape(xq.shape)

    def noise_std(self, xq) -> np.ndarray:
        flat = np.asarray(xq, dtype=float).reshape(-1, self.n)
        return np.column_stack([np.exp(gp.log_noise(flat)) for gp in self.dims])

    def to_json(self) -> dict:
        return {
            "kind": "hetgp",
            "inputs": [[_fmt(v) for v in row] for row in self.X],
            "dims": [gp.to_json() for gp in self.dims],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "HetGPModel":
        X = np.array([[float(v) for v in row] for row in obj["inputs"]], dtype=float)
        return cls([DimGP.from_json(d, X) for d in obj["dims"]], X)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1)


def predict_error(model: HetGPModel, xq) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and std of the perception error at ``xq``."""
    return model.predict(xq)


def _initial_kernel(X: np.ndarray, y: np.ndarray, scale: float = 0.5) -> tuple[KernelParams, float]:
    var = float(np.var(y))
    span = np.ptp(X, axis=0)
    ls = np.where(span > 0, scale * span, 1.0)
    return KernelParams(max(var, 1e-6), ls), max(0.1 * var, 1e-8)


# long lengthscales alone often settle on the "all noise" optimum for oscillating errors
_START_SCALES = (0.5, 0.1)


def _multistart(X, sq, y, iterations, step):
    """Ascend from each initial lengthscale scale and keep the best likelihood."""
    best = None
    for scale in _START_SCALES:
        init, nv = _initial_kernel(X, y, scale)
        theta, lml = _ascend(np.concatenate([init.to_log(), [np.log(nv)]]), sq, y, None, iterations, step)
        if best is None or lml > best[1]:
            best = (theta, lml)
    return best[0]


def _fit_dim(X, sub, sq, y, rng, rounds, n_samples, iterations, step) -> DimGP:
    # hyperparameters are ascended on the rows ``sub``; conditioning uses every row
    N = len(y)
    if not np.any(y):
        # identically zero errors: the optimum sits on the parameter floors
        kern, _ = _initial_kernel(X, y)
        floor = np.full(N, 0.5 * np.log(NOISE_BOUNDS[0]))
        return DimGP(kern, kern, NOISE_BOUNDS[0], float(floor[0]), X, y, floor)

    theta = _multistart(X, sq, y[sub], iterations, step)
    kernel = KernelParams.from_log(theta[:-1])
    noise = np.full(N, float(np.exp(theta[-1])))

    z_theta = None
    dim = None
    for _ in range(rounds):
        post = _Posterior(kernel, X, y, noise)
        mu, lat = post.mean_var(X)
        draws = mu[None, :] + np.sqrt(np.maximum(lat, 0.0))[None, :] * rng.standard_normal((n_samples, N))
        emp = np.maximum(np.mean((y[None, :] - draws) ** 2, axis=0), VARIANCE_FLOOR)
        t = 0.5 * (np.log(emp) + LOG_CHI2_BIAS)
        offset = float(np.mean(t))
        if z_theta is None:
            z_theta = _multistart(X, sq, (t - offset)[sub], iterations, step)
        else:
            z_theta, _ = _ascend(z_theta, sq, (t - offset)[sub], None, iterations, step)
        dim = DimGP(
            kernel,
            KernelParams.from_log(z_theta[:-1]),
            float(np.exp(z_theta[-1])),
            offset,
            X,
            y,
            t,
        )
        noise = np.exp(2.0 * dim.z_train)
        k_theta, _ = _ascend(kernel.to_log(), sq, y[sub], noise[sub], iterations, step)
        kernel = KernelParams.from_log(k_theta)
        dim = DimGP(kernel, dim.noise_kernel, dim.noise_gp_var, offset, X, y, t)
    return dim


def fit_heteroscedastic(
    D: PerceptionDataset,
    seed: int = 0,
    rounds: int = 3,
    n_samples: int = 20,
    iterations: int = 200,
    step: float = 0.01,
    max_fit_points: int | None = 300,
) -> HetGPModel:
    """Fit one heteroscedastic GP per error dimension of ``D``.

    Hyperparameters are fitted on at most ``max_fit_points`` rows (a seeded
    random subset) because each ascent step costs a dense factorisation; the
    posterior is always conditioned on the full dataset.  Deterministic for a
    fixed ``seed``.
    """
    if len(D) < 5:
        raise InsufficientData(f"need at least 5 samples, got {len(D)}")
    X = np.array(D.xhat)
    E = D.errors
    rng = np.random.default_rng(seed)
    N = len(D)
    if max_fit_points is not None and N > max_fit_points:
        sub = np.sort(rng.choice(N, size=max_fit_points, replace=False))
    else:
        sub = np.arange(N)
    sq = _sq_dists_per_dim(X[sub])
    dims = [_fit_dim(X, sub, sq, E[:, i], rng, rounds, n_samples, iterations, step) for i in range(D.n)]
    return HetGPModel(dims, X)
