"""Monte Carlo estimators for the transition semigroup ``P_t``, the Feynman-Kac
semigroup ``S_t`` and their spatial derivatives.

``P_t phi(x) = E[phi(X(t, x))]`` and ``S_t phi(x) = E[phi(X(t, x)) exp(-beta(t))]``
with ``beta(t) = int_0^t V(X(s, x)) ds``.  The derivative of ``S_t`` is estimated
by the Bismut-Elworthy-Li representation

    <D S_t phi(x), h> = (1/t) E[phi(X_t) e^{-beta_t} int_0^t <eta^h, dW>]
                        - E[phi(X_t) e^{-beta_t} int_0^t (1 - s/t) <V'(X_s), eta^h_s> ds]

and cross-checked against central finite differences with common random
numbers.  Independent estimates are drawn from distinct RNG streams so their
errors combine in quadrature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .drift_models import DriftModel, potential_V
from .errors import DivergenceError
from .mc import MCEstimate
from .sde_engine import SimConfig, brownian_block, continue_paths, simulate_paths

N_SIGMA = 4.0
_INCREMENT_CACHE_LIMIT = 60_000_000  # floats


def _pt(x, d):
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape != (d,):
        raise ValueError(f"expected a point of dimension {d}")
    return x


def _simulate(model, x, h, t, config, record="final", stream=0):
    cfg = config.with_(t_final=float(t))
    return simulate_paths(model, x, h, cfg, record=record, stream=stream).require_finite()


def _check_t(t):
    if not t > 0:
        raise ValueError(f"t must be positive, got {t}")


def default_delta(x):
    return 1e-3 * (1.0 + float(np.linalg.norm(x)))


# ---------------------------------------------------------------------------
# plain estimators


def estimate_Pt(model: DriftModel, phi: Callable, x, t, config: SimConfig, stream=0) -> MCEstimate:
    _check_t(t)
    b = _simulate(model, _pt(x, model.d), None, t, config, stream=stream)
    return MCEstimate.from_samples(phi(b.X[:, -1]))


def estimate_St(model: DriftModel, phi: Callable, x, t, config: SimConfig, stream=0) -> MCEstimate:
    _check_t(t)
    b = _simulate(model, _pt(x, model.d), None, t, config, stream=stream)
    return MCEstimate.from_samples(phi(b.X[:, -1]) * np.exp(-b.beta[:, -1]))


@dataclass(frozen=True)
class BelEstimate:
    i1: MCEstimate
    i2: MCEstimate
    total: MCEstimate
    samples: Optional[np.ndarray] = field(default=None, repr=False)


def bel_terms(batch, phi, k):
    """Per-path contributions to the two BEL terms at recorded index ``k``."""
    t = batch.times[k]
    w = phi(batch.X[:, k]) * np.exp(-batch.beta[:, k])
    return w * batch.ito[:, k] / t, -w * batch.weighted_vgrad(k)


def _bel_estimate(batch, phi, k):
    i1, i2 = bel_terms(batch, phi, k)
    tot = i1 + i2
    return BelEstimate(MCEstimate.from_samples(i1), MCEstimate.from_samples(i2),
                       MCEstimate.from_samples(tot), tot)


def estimate_DSt_bel(model: DriftModel, phi: Callable, x, h, t, config: SimConfig,
                     stream=0) -> BelEstimate:
    _check_t(t)
    h = _pt(h, model.d)
    if not np.linalg.norm(h) > 0:
        raise ValueError("direction h must be nonzero")
    b = _simulate(model, _pt(x, model.d), h, t, config, stream=stream)
    return _bel_estimate(b, phi, len(b.times) - 1)


# ---------------------------------------------------------------------------
# finite differences with common random numbers


def _fd_samples(model, phi, x, h, times, config, delta, weighted, stream):
    x, h = _pt(x, model.d), _pt(h, model.d)
    if delta is None:
        delta = default_delta(x)
    if not delta > 0:
        raise ValueError("delta must be positive")
    times = np.atleast_1d(np.asarray(times, dtype=float))
    tmax = float(times.max())
    bp = _simulate(model, x + delta * h, None, tmax, config, record=times, stream=stream)
    bm = _simulate(model, x - delta * h, None, tmax, config, record=times, stream=stream)
    out = []
    for t in times:
        kp, km = bp.index_of(t), bm.index_of(t)
        fp, fm = phi(bp.X[:, kp]), phi(bm.X[:, km])
        if weighted:
            fp = fp * np.exp(-bp.beta[:, kp])
            fm = fm * np.exp(-bm.beta[:, km])
        out.append((fp - fm) / (2.0 * delta))
    return out


def estimate_DPt_fd(model: DriftModel, phi: Callable, x, h, t, config: SimConfig, delta=None,
                    stream=0) -> MCEstimate:
    """``(P_t phi(x + delta h) - P_t phi(x - delta h)) / (2 delta)`` with paired errors."""
    _check_t(t)
    return MCEstimate.from_samples(_fd_samples(model, phi, x, h, [t], config, delta, False, stream)[0])


def estimate_DSt_fd(model: DriftModel, phi: Callable, x, h, t, config: SimConfig, delta=None,
                    stream=0) -> MCEstimate:
    """Central difference of ``S_t phi`` along ``h``; the oracle for the BEL estimator."""
    _check_t(t)
    return MCEstimate.from_samples(_fd_samples(model, phi, x, h, [t], config, delta, True, stream)[0])


@dataclass(frozen=True)
class BelComparison:
    t: float
    bel: BelEstimate
    fd: MCEstimate
    difference: MCEstimate
    n_sigma: float = N_SIGMA

    @property
    def passed(self):
        return abs(self.difference.value) <= self.n_sigma * self.difference.std_error


def compare_bel_fd(model: DriftModel, phi: Callable, x, h, times: Sequence[float],
                   config: SimConfig, delta=None, stream=0, n_sigma=N_SIGMA):
    """BEL estimate vs finite-difference oracle of ``S_t phi`` at several times.

    Both use the same paths (common random numbers), so the difference is
    formed per path and its standard error is the paired one.
    """
    x, h = _pt(x, model.d), _pt(h, model.d)
    times = sorted(float(t) for t in times)
    b = _simulate(model, x, h, times[-1], config, record=times, stream=stream)
    fds = _fd_samples(model, phi, x, h, times, config, delta, True, stream)
    out = []
    for t, fd in zip(times, fds):
        bel = _bel_estimate(b, phi, b.index_of(t))
        out.append(BelComparison(t, bel, MCEstimate.from_samples(fd),
                                 MCEstimate.from_samples(bel.samples - fd), n_sigma))
    return out


# ---------------------------------------------------------------------------
# identities


@dataclass(frozen=True)
class IdentityReport:
    name: str
    lhs: MCEstimate
    rhs: MCEstimate
    residual: float
    std_error: float
    tolerance: float
    n_sigma: float = N_SIGMA
    terms: dict = field(default_factory=dict)

    @property
    def passed(self):
        return abs(self.residual) <= self.n_sigma * self.std_error + self.tolerance


def _quad_steps(K, n_quad):
    """Quadrature nodes in s as step indices, ``0 = s_0 < ... < s_m = K``."""
    if n_quad < 2:
        raise ValueError("need at least two quadrature nodes")
    return np.unique(np.rint(np.linspace(0, K, n_quad)).astype(int))


def _coarse(idx):
    sub = idx[::2]
    if sub[-1] != idx[-1]:
        sub = np.append(sub, idx[-1])
    return sub


def _trapz_paths(values, s):
    """Trapezoid rule along axis 1 of ``values`` (paths x nodes)."""
    if len(s) < 2:
        return np.zeros(values.shape[0])
    return np.trapezoid(values, s, axis=1)


def check_voc_identity(model: DriftModel, phi: Callable, x, t, config: SimConfig, n_quad=16,
                       n_sigma=N_SIGMA) -> IdentityReport:
    """``P_t phi = S_t phi + int_0^t S_{t-s}(V P_s phi) ds`` at the point ``x``.

    Left side on stream 0.  On stream 1 each path is simulated once to ``t``;
    at node ``s`` the inner ``P_s phi`` is evaluated at ``X(t - s)`` by the
    same path's continuation, so ``S_{t-s}(V P_s phi)(x)`` is estimated by
    ``E[e^{-beta(t-s)} V(X(t-s)) phi(X(t))]`` (Markov property).  The
    quadrature tolerance is the change of the trapezoid value when every other
    node is dropped.
    """
    _check_t(t)
    x = _pt(x, model.d)
    if n_quad < 4:
        raise ValueError("n_quad must be at least 4")
    cfg = config.with_(t_final=float(t))
    K = cfg.n_steps
    s_idx = _quad_steps(K, n_quad)
    u_idx = K - s_idx
    rec = np.unique(np.concatenate([u_idx, [K]]))

    lhs_b = _simulate(model, x, None, t, config, stream=0)
    lhs = MCEstimate.from_samples(phi(lhs_b.X[:, -1]))

    b = _simulate(model, x, None, t, config, record=rec * cfg.dt, stream=1)
    kpos = {int(k): i for i, k in enumerate(rec)}
    fT = phi(b.X[:, kpos[K]])
    s_times = s_idx * cfg.dt
    cols = [kpos[int(u)] for u in u_idx]
    integrand = (np.exp(-b.beta[:, cols]) * potential_V(model, b.X[:, cols])) * fT[:, None]
    quad = _trapz_paths(integrand, s_times)
    c = _coarse(np.arange(len(s_idx)))
    quad_coarse = _trapz_paths(integrand[:, c], s_times[c])
    rhs_samples = fT * np.exp(-b.beta[:, kpos[K]]) + quad
    rhs = MCEstimate.from_samples(rhs_samples)
    quad_tol = abs(float(np.mean(quad) - np.mean(quad_coarse)))
    return IdentityReport(
        "variation_of_constants", lhs, rhs, lhs.value - rhs.value,
        math.hypot(lhs.std_error, rhs.std_error), quad_tol, n_sigma,
        {"S_t": MCEstimate.from_samples(fT * np.exp(-b.beta[:, kpos[K]])),
         "integral": MCEstimate.from_samples(quad)},
    )


def check_commutation_identity(model: DriftModel, phi, x, h, t, config: SimConfig, n_quad=16,
                               delta=None, n_sigma=N_SIGMA) -> IdentityReport:
    """``P_t(<D phi, h>) = <D P_t phi, h> - int_0^t P_{t-s}(<b' h, D P_s phi>) ds``.

    ``phi`` must provide ``grad``.  Left side on stream 0, the finite-difference
    derivative on stream 1, the integral on stream 2: the outer path runs to
    ``u = t - s``; there ``D P_s phi`` along ``w = b'(X(u)) h`` is a central
    difference of two restarts from ``X(u) +- delta w`` that reuse the outer
    path's remaining increments.
    """
    _check_t(t)
    x, h = _pt(x, model.d), _pt(h, model.d)
    d = model.d
    cfg = config.with_(t_final=float(t))
    K = cfg.n_steps
    delta0 = default_delta(x) if delta is None else float(delta)

    lhs_b = _simulate(model, x, None, t, config, stream=0)
    lhs = MCEstimate.from_samples(phi.grad(lhs_b.X[:, -1]) @ h)
    mid = estimate_DPt_fd(model, phi, x, h, t, config, delta0, stream=1)

    s_idx = _quad_steps(K, n_quad)
    u_idx = K - s_idx
    rec = np.unique(u_idx)
    outer = _simulate(model, x, None, t, config, record=rec * cfg.dt, stream=2)
    kpos = {int(k): i for i, k in enumerate(rec)}
    step_model = cfg.stepping_model(model)
    n = cfg.n_paths
    incr = None
    if K * n * d <= _INCREMENT_CACHE_LIMIT:
        incr = brownian_block(cfg.seed, 0, n, K, cfg.dt, d, stream=2)

    g = np.empty((n, len(s_idx)))
    for j, (s, u) in enumerate(zip(s_idx, u_idx)):
        Y = outer.X[:, kpos[int(u)]]
        w = np.einsum("nij,j->ni", step_model.jacobian(Y), h)
        dl = delta0 / np.maximum(1.0, np.linalg.norm(w, axis=1))
        sub = None if incr is None else incr[u:K]
        Xp, dp = continue_paths(model, Y + dl[:, None] * w, cfg, int(u), K, stream=2, increments=sub)
        Xm, dm = continue_paths(model, Y - dl[:, None] * w, cfg, int(u), K, stream=2, increments=sub)
        if dp.any() or dm.any():
            raise DivergenceError("inner finite-difference restart diverged")
        g[:, j] = (phi(Xp) - phi(Xm)) / (2.0 * dl)
    s_times = s_idx * cfg.dt
    integral_samples = _trapz_paths(g, s_times)
    c = _coarse(np.arange(len(s_idx)))
    quad_tol = abs(float(np.mean(integral_samples) - np.mean(_trapz_paths(g[:, c], s_times[c]))))
    integral = MCEstimate.from_samples(integral_samples)
    rhs = MCEstimate.combine(mid, integral, sign=-1.0)
    se = math.sqrt(lhs.std_error**2 + mid.std_error**2 + integral.std_error**2)
    return IdentityReport(
        "commutation", lhs, rhs, lhs.value - rhs.value, se, quad_tol, n_sigma,
        {"DP_t": mid, "integral": integral},
    )


# ---------------------------------------------------------------------------
# small-time behaviour


@dataclass(frozen=True)
class SmallTimeReport:
    times: np.ndarray
    estimates: list
    ratios: np.ndarray
    slope: Optional[float]
    conclusive: bool
    c_p: float
    slope_floor: float = -0.65

    @property
    def slope_ok(self):
        # an inconclusive fit is not a failure
        return (not self.conclusive) or self.slope >= self.slope_floor


def envelope_denominator(model, x, t, pt_abs_phi_p, p):
    N = model.params.N
    xn = float(np.linalg.norm(x))
    return (1.0 + t**-0.5) * (1.0 + xn ** (2 * N - 1)) * pt_abs_phi_p ** (1.0 / p)


def scan_small_t_singularity(model: DriftModel, phi: Callable, x, h, t_grid, config: SimConfig,
                             p=2.0, slope_floor=-0.65, stream=0) -> SmallTimeReport:
    """BEL estimates of ``<D S_t phi(x), h>`` over ``t_grid`` from one set of paths.

    Returns the log-log slope of ``|<D S_t phi, h>|`` against ``t`` and the
    envelope ratios ``|D S_t phi| / [(1 + t^{-1/2})(1 + |x|^{2N-1})(P_t |phi|^p)^{1/p}]``
    whose maximum is the fitted constant.
    """
    x, h = _pt(x, model.d), _pt(h, model.d)
    times = np.array(sorted(float(t) for t in t_grid))
    if times[0] < 10 * config.dt * (1 - 1e-12):
        raise ValueError("all grid times must be at least 10 dt")
    if len(times) < 2 or times[-1] / times[0] < 10 * (1 - 1e-12):
        raise ValueError("t_grid must span at least one decade")
    b = _simulate(model, x, h, times[-1], config, record=times, stream=stream)
    ests, ratios = [], []
    for t in times:
        k = b.index_of(t)
        est = _bel_estimate(b, phi, k).total
        moment = float(np.mean(np.abs(phi(b.X[:, k])) ** p))
        denom = envelope_denominator(model, x, t, moment, p)
        ests.append(est)
        ratios.append(abs(est.value) / denom if denom > 0 else 0.0)
    vals = np.array([abs(e.value) for e in ests])
    ses = np.array([e.std_error for e in ests])
    conclusive = bool(np.all(vals > 2.0 * ses) and np.all(vals > 0))
    slope = float(np.polyfit(np.log(times), np.log(vals), 1)[0]) if conclusive else None
    ratios = np.array(ratios)
    return SmallTimeReport(times, ests, ratios, slope, conclusive, float(ratios.max()), slope_floor)
