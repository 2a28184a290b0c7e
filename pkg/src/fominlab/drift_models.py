"""Drift models for additive-noise SDEs ``dX = b(X) dt + dW`` in R^d.

Every model carries a certificate ``(omega, a, K, N)`` for the two standing
assumptions on the drift:

    <b(x), x> <= -omega |x|^2 + a                  (dissipativity)
    |b(x)| + ||b'(x)|| <= K (1 + |x|^(2N))         (polynomial growth)

Drifts and Jacobians are vectorised: they accept arrays of shape ``(..., d)``
and return ``(..., d)`` and ``(..., d, d)`` respectively.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy import integrate, linalg

from .errors import ModelEvaluationError

ArrayFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class HypothesisParams:
    omega: float
    a: float
    K: float
    N: int
    d: int

    def __post_init__(self):
        if not self.omega > 0:
            raise ValueError(f"omega must be positive, got {self.omega}")
        if not self.a >= 0:
            raise ValueError(f"a must be nonnegative, got {self.a}")
        if not self.K > 0:
            raise ValueError(f"K must be positive, got {self.K}")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"N must be a positive integer, got {self.N}")
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"d must be a positive integer, got {self.d}")
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "d", int(self.d))


@dataclass(frozen=True)
class Oracle:
    """Closed-form or quadrature facts about a built-in model.

    ``linear_matrix`` is set for linear drifts ``b(x) = A x``; the transition
    law is then Gaussian and :meth:`transition_moments` is exact.
    ``log_density`` is an unnormalised stationary log-density, and for d = 1
    ``stationary_expectation`` integrates against it by adaptive quadrature.
    """

    log_density: Optional[ArrayFn] = None
    log_density_grad: Optional[ArrayFn] = None
    stationary_cov: Optional[np.ndarray] = None
    linear_matrix: Optional[np.ndarray] = None
    quad_range: tuple = (-6.0, 6.0)

    def transition_moments(self, x, t):
        """Mean and covariance of X(t, x) for a linear drift."""
        if self.linear_matrix is None:
            raise ValueError("transition law is only known for linear drifts")
        A = self.linear_matrix
        d = A.shape[0]
        mean = linalg.expm(t * A) @ np.asarray(x, dtype=float)
        # Van Loan block exponential for the integral of e^{sA} e^{sA^T}
        blk = np.zeros((2 * d, 2 * d))
        blk[:d, :d] = -A
        blk[:d, d:] = np.eye(d)
        blk[d:, d:] = A.T
        e = linalg.expm(t * blk)
        phi22 = e[d:, d:]
        cov = phi22.T @ e[:d, d:]
        return mean, 0.5 * (cov + cov.T)

    def stationary_expectation(self, f):
        """Integrate ``f`` against the normalised stationary density (d = 1)."""
        if self.log_density is None:
            raise ValueError("no stationary density available")
        lo, hi = self.quad_range
        dens = lambda x: math.exp(float(self.log_density(np.array([x]))))
        z, _ = integrate.quad(dens, lo, hi, limit=200)
        val, _ = integrate.quad(lambda x: f(x) * dens(x), lo, hi, limit=200)
        return val / z


@dataclass(frozen=True)
class DriftModel:
    name: str
    params: HypothesisParams
    drift: ArrayFn = field(repr=False)
    jacobian: ArrayFn = field(repr=False)
    oracle: Optional[Oracle] = field(default=None, repr=False)

    @property
    def d(self):
        return self.params.d


def _as_points(x, d):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.shape[-1] != d:
        raise ValueError(f"expected points with last dimension {d}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("evaluation point must be finite")
    return x


def eval_drift(model: DriftModel, x) -> np.ndarray:
    x = _as_points(x, model.d)
    out = np.asarray(model.drift(x), dtype=float)
    if not np.all(np.isfinite(out)):
        raise ModelEvaluationError(f"{model.name}: drift is not finite at {x}")
    return out


def eval_jacobian(model: DriftModel, x) -> np.ndarray:
    x = _as_points(x, model.d)
    out = np.asarray(model.jacobian(x), dtype=float)
    if not np.all(np.isfinite(out)):
        raise ModelEvaluationError(f"{model.name}: Jacobian is not finite at {x}")
    return out


def potential_V(model: DriftModel, x) -> np.ndarray:
    """Feynman-Kac potential ``V(x) = K (1 + |x|^(2N))``."""
    p = model.params
    x = np.asarray(x, dtype=float)
    r2 = np.sum(x * x, axis=-1)
    return p.K * (1.0 + r2**p.N)


def potential_grad(model: DriftModel, x) -> np.ndarray:
    """Gradient ``V'(x) = 2 N K |x|^(2N-2) x``."""
    p = model.params
    x = np.asarray(x, dtype=float)
    r2 = np.sum(x * x, axis=-1, keepdims=True)
    return 2.0 * p.N * p.K * r2 ** (p.N - 1) * x


# ---------------------------------------------------------------------------
# certificate checking


@dataclass(frozen=True)
class HypothesisReport:
    model: str
    dissipativity_slack: float
    growth_slack: float
    dissipativity_argmin: np.ndarray
    growth_argmin: np.ndarray
    tol: float
    n_points: int

    @property
    def dissipativity_ok(self):
        return self.dissipativity_slack >= -self.tol

    @property
    def growth_ok(self):
        return self.growth_slack >= -self.tol

    @property
    def passed(self):
        return self.dissipativity_ok and self.growth_ok


def default_grid(d, radius=10.0, n_points=10_000, seed=0):
    """Radial shells up to ``radius``.

    In one dimension this is a uniform grid on ``[-radius, radius]``.  In higher
    dimension, shells are spaced uniformly in radius and carry a fixed set of
    directions, deterministic in ``seed``.
    """
    if d == 1:
        return np.linspace(-radius, radius, n_points).reshape(-1, 1)
    n_dirs = max(8, int(round(n_points ** 0.5)))
    n_shells = max(1, n_points // n_dirs)
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_dirs, d))
    dirs[:d] = np.eye(d)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = np.linspace(0.0, radius, n_shells)
    return (radii[:, None, None] * dirs[None, :, :]).reshape(-1, d)


def check_hypothesis(model: DriftModel, grid=None, tol=1e-9) -> HypothesisReport:
    p = model.params
    if grid is None:
        grid = default_grid(p.d)
    grid = np.asarray(grid, dtype=float)
    if p.d == 1 and grid.ndim == 1:
        grid = grid[:, None]
    grid = _as_points(grid, p.d).reshape(-1, p.d)
    if grid.shape[0] == 0:
        raise ValueError("grid must be nonempty")
    b = eval_drift(model, grid)
    J = eval_jacobian(model, grid)
    r2 = np.sum(grid * grid, axis=1)
    diss = -p.omega * r2 + p.a - np.sum(b * grid, axis=1)
    jnorm = np.linalg.norm(J, ord=2, axis=(-2, -1))
    growth = p.K * (1.0 + r2**p.N) - (np.linalg.norm(b, axis=1) + jnorm)
    i, j = int(np.argmin(diss)), int(np.argmin(growth))
    return HypothesisReport(
        model=model.name,
        dissipativity_slack=float(diss[i]),
        growth_slack=float(growth[j]),
        dissipativity_argmin=grid[i].copy(),
        growth_argmin=grid[j].copy(),
        tol=float(tol),
        n_points=grid.shape[0],
    )


# ---------------------------------------------------------------------------
# taming


def tame_drift(model: DriftModel, n) -> DriftModel:
    """Regularised drift ``f_n(x) = (b(x) + omega x) / (1 + |x|^(2N+2) / n) - omega x``.

    ``f_n`` keeps the dissipativity bound of ``b`` pointwise, is sub-linear at
    infinity and converges to ``b`` as ``n`` grows.  The Jacobian is exact.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    p = model.params
    w, q, inv_n = p.omega, p.N + 1, 1.0 / float(n)
    b, jac = model.drift, model.jacobian

    def drift(x):
        x = np.asarray(x, dtype=float)
        r2 = np.sum(x * x, axis=-1, keepdims=True)
        return (b(x) + w * x) / (1.0 + inv_n * r2**q) - w * x

    def jacobian(x):
        x = np.asarray(x, dtype=float)
        d = x.shape[-1]
        r2 = np.sum(x * x, axis=-1, keepdims=True)
        denom = 1.0 + inv_n * r2**q
        g = b(x) + w * x
        dg = jac(x) + w * np.eye(d)
        dr = (2.0 * q * inv_n) * r2 ** (q - 1) * x
        out = dg / denom[..., None] - g[..., :, None] * dr[..., None, :] / (denom**2)[..., None]
        return out - w * np.eye(d)

    return DriftModel(f"{model.name}_tamed{int(n)}", p, drift, jacobian, model.oracle)


# ---------------------------------------------------------------------------
# built-in models

J_ROT = np.array([[0.0, -1.0], [1.0, 0.0]])


def linear_model(name, A, params, stationary_cov=None) -> DriftModel:
    A = np.asarray(A, dtype=float)

    def drift(x):
        return np.asarray(x, dtype=float) @ A.T

    def jacobian(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(A, x.shape[:-1] + A.shape).copy()

    if stationary_cov is None:
        # A S + S A^T + I = 0
        stationary_cov = linalg.solve_continuous_lyapunov(A, -np.eye(A.shape[0]))
    prec = np.linalg.inv(stationary_cov)

    def log_density(x):
        x = np.asarray(x, dtype=float)
        return -0.5 * np.einsum("...i,ij,...j->...", x, prec, x)

    def log_density_grad(x):
        return -np.asarray(x, dtype=float) @ prec.T

    oracle = Oracle(log_density=log_density, log_density_grad=log_density_grad,
                    stationary_cov=stationary_cov, linear_matrix=A)
    return DriftModel(name, params, drift, jacobian, oracle)


def ou_model(d=1, **overrides) -> DriftModel:
    """``b(x) = -x``; stationary law N(0, I/2)."""
    params = HypothesisParams(**{"omega": 1.0, "a": 0.0, "K": 2.0, "N": 1, "d": d, **overrides})
    return linear_model("ou", -np.eye(params.d), params)


def rotated_model(**overrides) -> DriftModel:
    """Non-gradient linear drift ``b(x) = -x + J x`` in R^2; stationary law N(0, I/2)."""
    params = HypothesisParams(**{"omega": 1.0, "a": 0.0, "K": 3.0, "N": 1, "d": 2, **overrides})
    if params.d != 2:
        raise ValueError("rotated model is two-dimensional")
    return linear_model("rotated", -np.eye(2) + J_ROT, params)


def double_well_model(**overrides) -> DriftModel:
    """``b(x) = x - x^3``; stationary density proportional to ``exp(x^2 - x^4/2)``.

    The drift is cubic, so the growth certificate needs ``N = 2``.
    """
    params = HypothesisParams(**{"omega": 1.0, "a": 1.0, "K": 4.0, "N": 2, "d": 1, **overrides})
    if params.d != 1:
        raise ValueError("double-well model is one-dimensional")

    def drift(x):
        x = np.asarray(x, dtype=float)
        return x - x**3

    def jacobian(x):
        x = np.asarray(x, dtype=float)
        return (1.0 - 3.0 * x**2)[..., None]

    def log_density(x):
        x = np.asarray(x, dtype=float)[..., 0]
        return x**2 - 0.5 * x**4

    def log_density_grad(x):
        x = np.asarray(x, dtype=float)
        return 2.0 * x - 2.0 * x**3

    oracle = Oracle(log_density=log_density, log_density_grad=log_density_grad)
    return DriftModel("double_well", params, drift, jacobian, oracle)


_REGISTRY: dict = {
    "ou": ou_model,
    "double_well": double_well_model,
    "rotated": rotated_model,
}


def register_model(name, factory):
    """Register a user model factory ``factory(**param_overrides) -> DriftModel``."""
    if name in _REGISTRY:
        raise ValueError(f"model {name!r} already registered")
    _REGISTRY[name] = factory


def available_models():
    return sorted(_REGISTRY)


def get_model(name, **overrides) -> DriftModel:
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; available: {available_models()}") from None
    return factory(**overrides)


def with_params(model: DriftModel, **overrides) -> DriftModel:
    """Same drift with a different certificate (e.g. to test a wrong claim)."""
    return replace(model, params=replace(model.params, **overrides))
