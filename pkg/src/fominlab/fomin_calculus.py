"""Density, Fomin score and the gradient/divergence calculus of an invariant measure.

The density of the invariant measure is estimated by a Gaussian kernel mixture.
The score ``v_z`` is the function that makes the integration-by-parts identity

    int <D phi, z> dnu = int v_z phi dnu

hold; for a smooth positive density this is ``v_z = -<D log rho, z>``, and the
estimate differentiates the fitted mixture analytically.

From ``v`` one builds the adjoint of the gradient,
``D*(F) = -div F + sum_h v_{e_h} f_h``, and the operator
``-1/2 D*D phi = 1/2 Laplacian(phi) - 1/2 sum_h v_{e_h} D_h phi``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateSampleError
from .invariant_measure import EmpiricalMeasure
from .mc import MCEstimate
from .observables import TestFunction, VectorField

# v_z = SIGN_CONVENTION * <D log rho, z>; -1 is the orientation under which the
# OU oracle (rho ~ exp(-|x|^2), v_z = 2 <x, z>) satisfies integration by parts
SIGN_CONVENTION = -1.0

MIN_EFFECTIVE_SAMPLES = 100
EXACT_MAX_CENTERS = 3000
DEFAULT_GRID = {1: 1024, 2: 128, 3: 40}
_CHUNK_ELEMS = 4_000_000


# ---------------------------------------------------------------------------
# kernel density


@dataclass(frozen=True)
class KdeDensity:
    """Gaussian mixture ``sum_j w_j N(c_j, diag(bandwidth^2))``.

    With ``axes`` set the centres form a tensor grid and ``weights`` has the grid's
    shape (linear binning of the source sample); otherwise ``centers`` are the
    sample points themselves.
    """

    source: EmpiricalMeasure = field(repr=False)
    bandwidth: np.ndarray
    centers: Optional[np.ndarray] = field(default=None, repr=False)
    weights: Optional[np.ndarray] = field(default=None, repr=False)
    axes: Optional[tuple] = field(default=None, repr=False)
    kernel: str = "gaussian"

    @property
    def d(self):
        return self.bandwidth.size

    @property
    def binned(self):
        return self.axes is not None

    @cached_property
    def _log_norm(self):
        return -float(np.sum(np.log(self.bandwidth))) - 0.5 * self.d * math.log(2 * math.pi)

    def _points(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(1, -1) if x.size == self.d else x.reshape(-1, 1)
        if x.shape[-1] != self.d:
            raise ValueError(f"expected points of dimension {self.d}")
        return x

    def _sums(self, x, second=False):
        """Rescaled mixture sums ``(log_scale, S, G, L)``.

        ``rho(x) = S * exp(log_scale + log_norm)``, ``grad rho / rho = G / S`` and
        ``laplacian rho / rho = L / S``; ``L`` is None unless ``second``.
        """
        if not self.binned:
            return _sums_exact(x, self.centers, self.weights, self.bandwidth, second)
        out = list(self._sums_grid(x, second))
        bad = ~(out[1] > 0)
        if bad.any():
            # far from all mass the rescaled grid sum underflows; fall back to exact
            nz = self.weights > 0
            mesh = np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)[nz]
            ex = _sums_exact(x[bad], mesh, self.weights[nz], self.bandwidth, second)
            for arr, val in zip(out, ex):
                if arr is not None:
                    arr[bad] = val
        return tuple(out)

    def _sums_grid(self, x, second):
        n, d = x.shape
        h = self.bandwidth
        W = self.weights
        log_scale = np.zeros(n)
        S = np.zeros(n)
        G = np.zeros((n, d))
        L = np.zeros(n) if second else None
        M = [a.size for a in self.axes]
        rest = int(np.prod(M[1:])) if d > 1 else 1
        step = max(1, _CHUNK_ELEMS // max(rest, max(M)))
        for lo in range(0, n, step):
            sl = slice(lo, lo + step)
            A, dA, d2A = [], [], []
            for j in range(d):
                u = (x[sl, j, None] - self.axes[j][None, :]) / h[j]
                e = -0.5 * u * u
                emax = e.max(axis=1)
                log_scale[sl] += emax
                k = np.exp(e - emax[:, None])
                A.append(k)
                dA.append(-k * u / h[j])
                d2A.append(k * (u * u - 1.0) / h[j] ** 2)
            S[sl] = _contract(W, A)
            for j in range(d):
                G[sl, j] = _contract(W, A[:j] + [dA[j]] + A[j + 1:])
                if second:
                    L[sl] += _contract(W, A[:j] + [d2A[j]] + A[j + 1:])
        return log_scale, S, G, L

    def log_density(self, x):
        x = self._points(x)
        ls, S, _, _ = self._sums(x)
        return ls + np.log(S) + self._log_norm

    def density(self, x):
        return np.exp(self.log_density(x))

    def grad_log(self, x):
        """Analytic ``D log rho`` of the mixture, shape ``(n, d)``."""
        x = self._points(x)
        _, S, G, _ = self._sums(x)
        return G / S[:, None]

    def grad_and_laplacian_log(self, x):
        """``D log rho`` and ``laplacian log rho``, both analytic."""
        x = self._points(x)
        _, S, G, L = self._sums(x, second=True)
        g = G / S[:, None]
        return g, L / S - np.sum(g * g, axis=1)


def _contract(W, factors):
    """``sum_{a,b,..} W[a,b,..] F1[n,a] F2[n,b] ..`` for each row n."""
    n = factors[0].shape[0]
    T = factors[0] @ W.reshape(W.shape[0], -1)
    for F in factors[1:]:
        T = np.einsum("nab,na->nb", T.reshape(n, F.shape[1], -1), F)
    return T.reshape(n)


def _sums_exact(x, centers, weights, h, second=False):
    n, d = x.shape
    m = centers.shape[0]
    log_scale = np.empty(n)
    S = np.empty(n)
    G = np.empty((n, d))
    L = np.empty(n) if second else None
    step = max(1, _CHUNK_ELEMS // (m * d))
    for lo in range(0, n, step):
        sl = slice(lo, lo + step)
        u = (x[sl, None, :] - centers[None, :, :]) / h
        e = -0.5 * np.sum(u * u, axis=2)
        emax = e.max(axis=1)
        k = np.exp(e - emax[:, None]) * weights[None, :]
        log_scale[sl] = emax
        S[sl] = k.sum(axis=1)
        G[sl] = np.einsum("nm,nmd->nd", k, -u / h)
        if second:
            L[sl] = np.einsum("nm,nm->n", k, np.sum((u * u - 1.0) / h**2, axis=2))
    return log_scale, S, G, L


def silverman_bandwidth(measure: EmpiricalMeasure):
    """``(4/(d+2))^(1/(d+4)) n^(-1/(d+4)) sigma_j`` per coordinate (n effective)."""
    d = measure.d
    w = measure.weights
    mu = w @ measure.samples
    sigma = np.sqrt(w @ (measure.samples - mu) ** 2)
    # rounding in the weighted mean leaves a tiny spread on constant samples
    if np.any(sigma <= 1e-12 * np.maximum(1.0, np.abs(mu))):
        raise DegenerateSampleError("sample has zero spread along some coordinate")
    n = measure.effective_size
    return (4.0 / (d + 2)) ** (1.0 / (d + 4)) * n ** (-1.0 / (d + 4)) * sigma


def _linear_binning(samples, weights, axes):
    n, d = samples.shape
    M = [a.size for a in axes]
    base = np.zeros((n, d), dtype=np.int64)
    frac = np.zeros((n, d))
    for j, ax in enumerate(axes):
        delta = ax[1] - ax[0]
        pos = (samples[:, j] - ax[0]) / delta
        i = np.clip(np.floor(pos).astype(np.int64), 0, M[j] - 2)
        base[:, j] = i
        frac[:, j] = np.clip(pos - i, 0.0, 1.0)
    strides = np.array([int(np.prod(M[j + 1:])) for j in range(d)], dtype=np.int64)
    total = np.zeros(int(np.prod(M)))
    for corner in itertools.product((0, 1), repeat=d):
        c = np.array(corner)
        wt = weights * np.prod(np.where(c == 1, frac, 1.0 - frac), axis=1)
        idx = (base + c) @ strides
        total += np.bincount(idx, weights=wt, minlength=total.size)
    return total.reshape(M)


def score_bandwidth(measure: EmpiricalMeasure):
    """Normal-reference rule for first derivatives: ``(4/(d+4))^(1/(d+6)) n^(-1/(d+6)) sigma_j``.

    Wider than Silverman's rule; the density gradient has higher variance than the
    density, so its error-balancing bandwidth shrinks more slowly with n.
    """
    d = measure.d
    h = silverman_bandwidth(measure)
    n = measure.effective_size
    sigma = h / ((4.0 / (d + 2)) ** (1.0 / (d + 4)) * n ** (-1.0 / (d + 4)))
    return (4.0 / (d + 4)) ** (1.0 / (d + 6)) * n ** (-1.0 / (d + 6)) * sigma


BANDWIDTH_RULES = {"silverman": silverman_bandwidth, "score": score_bandwidth}
MAX_GRID = {1: 4096, 2: 256, 3: 64}


def kde_fit(measure: EmpiricalMeasure, bandwidth_rule="silverman", method="auto",
            grid_size=None, pad=5.0, variance_correction=False) -> KdeDensity:
    """Fit a Gaussian KDE to ``measure``.

    ``bandwidth_rule`` is ``"silverman"``, ``"score"`` (see :func:`score_bandwidth`),
    ``"score_matching"`` (see :func:`select_bandwidth`) or a fixed bandwidth
    (scalar or one per coordinate).

    ``method="binned"`` replaces the samples by linear-binned weights on a
    tensor grid with spacing at most half the bandwidth (within a per-dimension
    cap), so that large samples stay cheap to evaluate; ``"auto"`` bins above a
    few thousand points.

    With ``variance_correction`` both the centres (about the sample mean) and
    the kernel width are scaled by ``c_j = (1 + h_j^2 / sigma_j^2)^(-1/2)``, so the
    mixture keeps the sample variance instead of inflating it by ``h^2``.  This
    removes the leading smoothing bias of the score for near-Gaussian targets.
    The stored ``bandwidth`` is then the scaled one, ``c_j h_j``.
    """
    if len(measure) < 2 and isinstance(bandwidth_rule, str):
        raise DegenerateSampleError("a single atom has no spread")
    if measure.effective_size < MIN_EFFECTIVE_SAMPLES and not isinstance(bandwidth_rule, str):
        raise ValueError(f"need at least {MIN_EFFECTIVE_SAMPLES} effective samples for a density fit")
    if isinstance(bandwidth_rule, str):
        if bandwidth_rule == "score_matching":
            h = select_bandwidth(measure, variance_correction=variance_correction, method=method,
                                 grid_size=grid_size)[0]
        elif bandwidth_rule in BANDWIDTH_RULES:
            h = BANDWIDTH_RULES[bandwidth_rule](measure)
        else:
            raise ValueError(f"unknown bandwidth rule {bandwidth_rule!r}")
    else:
        h = np.broadcast_to(np.asarray(bandwidth_rule, dtype=float), (measure.d,)).copy()
        if np.any(h <= 0):
            raise ValueError("bandwidth must be positive")
    if measure.effective_size < MIN_EFFECTIVE_SAMPLES:
        raise ValueError(f"need at least {MIN_EFFECTIVE_SAMPLES} effective samples for a density fit")
    return _build(measure, h, method, grid_size, pad, variance_correction)


def _build(measure, h, method, grid_size, pad, variance_correction):
    pts = measure.samples
    if variance_correction:
        mu = measure.weights @ pts
        var = measure.weights @ (pts - mu) ** 2
        c = 1.0 / np.sqrt(1.0 + h**2 / var)
        pts = mu + c * (pts - mu)
        h = c * h
    if method == "auto":
        method = "exact" if len(measure) <= EXACT_MAX_CENTERS else "binned"
    if method == "exact":
        return KdeDensity(measure, h, centers=pts, weights=measure.weights)
    if method != "binned":
        raise ValueError(f"unknown method {method!r}")
    d = measure.d
    lo = pts.min(axis=0) - pad * h
    hi = pts.max(axis=0) + pad * h
    if grid_size:
        M = [int(grid_size)] * d
    else:
        cap = MAX_GRID.get(d, 24)
        M = [int(min(cap, max(DEFAULT_GRID.get(d, 24), np.ceil(2 * (hi[j] - lo[j]) / h[j]) + 1)))
             for j in range(d)]
    axes = tuple(np.linspace(lo[j], hi[j], M[j]) for j in range(d))
    W = _linear_binning(pts, measure.weights, axes)
    return KdeDensity(measure, h, weights=W, axes=axes)


def score_matching_loss(density: KdeDensity, measure: EmpiricalMeasure) -> float:
    """``int (1/2 |D log rho|^2 + laplacian log rho) dnu``.

    Up to a term free of the fit this is half the squared ``L^2(nu)`` distance
    between the fitted and the true score.
    """
    g, lap = density.grad_and_laplacian_log(measure.samples)
    return float(measure.weights @ (0.5 * np.sum(g * g, axis=1) + lap))


def select_bandwidth(measure: EmpiricalMeasure, factors=None, variance_correction=False,
                     method="auto", grid_size=None):
    """Bandwidth minimising the held-out score-matching loss.

    Samples are split by alternating index; candidates are multiples of the
    Silverman bandwidth of the fitting half.  The winner is rescaled from half
    to full sample size with the ``n^(-1/(d+6))`` rate of derivative estimation.
    Returns ``(h, factors, losses)``.
    """
    n = len(measure)
    if n < 2 * MIN_EFFECTIVE_SAMPLES:
        raise ValueError("need at least twice the minimum sample size for a held-out split")
    factors = np.geomspace(0.5, 4.0, 10) if factors is None else np.asarray(factors, dtype=float)
    idx = np.arange(n)
    fit_half = EmpiricalMeasure(measure.samples[idx % 2 == 0], measure.weights[idx % 2 == 0])
    test_half = EmpiricalMeasure(measure.samples[idx % 2 == 1], measure.weights[idx % 2 == 1])
    base = silverman_bandwidth(fit_half)
    losses = np.array([
        score_matching_loss(_build(fit_half, f * base, method, grid_size, 5.0, variance_correction),
                            test_half)
        for f in factors
    ])
    best = int(np.argmin(losses))
    scale = (fit_half.effective_size / measure.effective_size) ** (1.0 / (measure.d + 6))
    return factors[best] * base * scale, factors, losses


# ---------------------------------------------------------------------------
# score


@dataclass(frozen=True)
class ScoreField:
    density: KdeDensity
    sign_convention: float = SIGN_CONVENTION

    def field(self, x):
        """All coordinate scores ``(v_{e_1}, ..., v_{e_d})`` at ``x``, shape ``(n, d)``."""
        return self.sign_convention * self.density.grad_log(x)

    def __call__(self, x, z):
        return self.field(x) @ np.asarray(z, dtype=float).reshape(-1)

    @cached_property
    def at_samples(self):
        return self.field(self.density.source.samples)

    def to_csv(self, path):
        """Score at the source samples: columns ``x_i`` then ``v_e_i``."""
        x = self.density.source.samples
        d = x.shape[1]
        header = ",".join([f"x_{i + 1}" for i in range(d)] + [f"v_e{i + 1}" for i in range(d)])
        np.savetxt(path, np.hstack([x, self.at_samples]), delimiter=",", header=header,
                   comments="", fmt="%.17g")

    def on(self, measure, x=None):
        if x is None and measure is self.density.source:
            return self.at_samples
        return self.field(measure.samples if x is None else x)


def fit_score(measure: EmpiricalMeasure, bandwidth_rule="silverman", **kw) -> ScoreField:
    return ScoreField(kde_fit(measure, bandwidth_rule, **kw))


def score(density: KdeDensity, x, z):
    """``v_z(x)`` from a fitted density."""
    return ScoreField(density)(x, z)


def oracle_score(model):
    """Exact score ``-D log rho`` for built-in models with a known density."""
    if model.oracle is None or model.oracle.log_density_grad is None:
        raise ValueError(f"model {model.name} has no stationary density oracle")
    g = model.oracle.log_density_grad
    return lambda x: SIGN_CONVENTION * g(np.asarray(x, dtype=float))


def score_relative_error(measure: EmpiricalMeasure, scorefield: ScoreField, exact):
    """``||v_hat - v||_{L^2(nu_hat)} / ||v||_{L^2(nu_hat)}`` over all coordinates."""
    vh = scorefield.on(measure)
    v = exact(measure.samples)
    num = measure.weights @ np.sum((vh - v) ** 2, axis=1)
    den = measure.weights @ np.sum(v**2, axis=1)
    return math.sqrt(num / den)


# ---------------------------------------------------------------------------
# integration by parts and the main inequality


def lp_norm(measure: EmpiricalMeasure, phi, p) -> MCEstimate:
    """``(int |phi|^p dnu)^(1/p)`` with a delta-method standard error."""
    if p < 1:
        raise ValueError("p must be >= 1")
    est = measure.expect(np.abs(phi(measure.samples)) ** p)
    m = max(est.value, 0.0)
    if m == 0:
        return MCEstimate(0.0, 0.0, est.n_samples)
    val = m ** (1.0 / p)
    return MCEstimate(val, val / (p * m) * est.std_error, est.n_samples)


@dataclass(frozen=True)
class IbpReport:
    label: str
    lhs: MCEstimate
    rhs: MCEstimate
    difference: MCEstimate
    phi_norm: float
    z_norm: float

    @property
    def normalized_residual(self):
        if self.z_norm == 0 or self.phi_norm == 0:
            return 0.0
        return abs(self.difference.value) / (self.phi_norm * self.z_norm)

    def consistent(self, n_sigma=4.0):
        return abs(self.difference.value) <= n_sigma * self.difference.std_error


def ibp_residual(measure: EmpiricalMeasure, scorefield: ScoreField, phi: TestFunction, z,
                 p=2.0) -> IbpReport:
    """Both sides of ``int <D phi, z> dnu = int v_z phi dnu`` on ``measure``."""
    z = np.asarray(z, dtype=float).reshape(-1)
    x = measure.samples
    left = phi.grad(x) @ z
    right = (scorefield.on(measure) @ z) * phi(x)
    return IbpReport(
        getattr(phi, "label", "phi"),
        measure.expect(left),
        measure.expect(right),
        measure.expect(left - right),
        lp_norm(measure, phi, p).value,
        float(np.linalg.norm(z)),
    )


@dataclass(frozen=True)
class CpEntry:
    label: str
    direction: tuple
    ratio: float
    std_error: float
    dual_ratio: float


@dataclass(frozen=True)
class CpReport:
    entries: list
    sup: float
    half_sup: float
    p: float

    @property
    def relative_growth(self):
        """How much the sup grows from half of the battery to all of it."""
        if self.half_sup == 0:
            return 0.0 if self.sup == 0 else math.inf
        return (self.sup - self.half_sup) / self.half_sup

    def stable(self, tol=0.25):
        return self.relative_growth <= tol

    def entry(self, label, direction=None):
        for e in self.entries:
            if e.label == label and (direction is None or np.allclose(e.direction, direction)):
                return e
        raise KeyError(label)


def estimate_Cp(measure: EmpiricalMeasure, scorefield: Optional[ScoreField],
                battery: Sequence[TestFunction], directions, p=2.0) -> CpReport:
    """``max |int <D phi, h> dnu| / (||phi||_{L^p} |h|)`` over battery x directions.

    ``dual_ratio`` reports the same quotient with the left side replaced by
    ``int v_h phi dnu`` (when a score field is supplied).
    """
    if not battery:
        raise ValueError("battery must be nonempty")
    x = measure.samples
    V = scorefield.on(measure) if scorefield is not None else None
    entries = []
    for tf in battery:
        norm = lp_norm(measure, tf, p)
        if not norm.value > 0:
            raise ValueError(f"{tf.label} has zero L^p norm")
        g = tf.grad(x)
        fx = tf(x)
        for h in directions:
            h = np.asarray(h, dtype=float).reshape(-1)
            hn = float(np.linalg.norm(h))
            est = measure.expect(g @ h)
            denom = norm.value * hn
            ratio = abs(est.value) / denom
            se = math.hypot(est.std_error / denom, ratio * norm.std_error / norm.value)
            dual = float("nan")
            if V is not None:
                dual = abs(measure.expect((V @ h) * fx).value) / denom
            entries.append(CpEntry(tf.label, tuple(h.tolist()), ratio, se, dual))
    n_half = max(1, len(battery) // 2)
    half_labels = {tf.label for tf in battery[:n_half]}
    sup = max(e.ratio for e in entries)
    half_sup = max(e.ratio for e in entries if e.label in half_labels)
    return CpReport(entries, sup, half_sup, float(p))


def score_lp_norms(measure: EmpiricalMeasure, scorefield: ScoreField, z, ps=(1, 2, 4, 8)):
    z = np.asarray(z, dtype=float).reshape(-1)
    v = scorefield.on(measure) @ z
    return {p: lp_norm(measure, lambda _x, v=v: v, p) for p in ps}


# ---------------------------------------------------------------------------
# adjoint and generalised Ornstein-Uhlenbeck operator


def dstar(measure: Optional[EmpiricalMeasure], scorefield: ScoreField, F: VectorField, x):
    """``D*(F)(x) = -div F(x) + sum_h v_{e_h}(x) f_h(x)``.

    ``x=None`` evaluates on the samples of ``measure``, reusing the cached score.
    """
    if x is None:
        pts, v = measure.samples, scorefield.on(measure)
    else:
        pts = np.asarray(x, dtype=float).reshape(-1, scorefield.density.d)
        v = scorefield.field(pts)
    return -F.divergence(pts) + np.sum(v * F(pts), axis=1)


def generalized_ou_apply(scorefield: ScoreField, phi: TestFunction, x):
    """``-1/2 D*D phi = 1/2 tr(D^2 phi) - 1/2 sum_h v_{e_h} D_h phi``."""
    if phi.hessian is None:
        raise ValueError(f"{phi.label} has no Hessian")
    pts = np.asarray(x, dtype=float).reshape(-1, scorefield.density.d)
    lap = np.trace(phi.hessian(pts), axis1=-2, axis2=-1)
    return 0.5 * lap - 0.5 * np.sum(scorefield.field(pts) * phi.grad(pts), axis=1)


def adjointness_residual(measure: EmpiricalMeasure, scorefield: ScoreField, phi: TestFunction,
                         F: VectorField) -> MCEstimate:
    """Paired estimate of ``int <D phi, F> dnu - int phi D*(F) dnu``."""
    x = measure.samples
    v = scorefield.on(measure)
    Fx = F(x)
    ds = -F.divergence(x) + np.sum(v * Fx, axis=1)
    return measure.expect(np.sum(phi.grad(x) * Fx, axis=1) - phi(x) * ds)


def dirichlet_residual(measure: EmpiricalMeasure, scorefield: ScoreField, phi: TestFunction,
                       psi: TestFunction) -> MCEstimate:
    """Paired estimate of ``int (-1/2 D*D phi) psi dnu + 1/2 int <D phi, D psi> dnu``."""
    x = measure.samples
    v = scorefield.on(measure)
    lap = np.trace(phi.hessian(x), axis1=-2, axis2=-1)
    gen = 0.5 * lap - 0.5 * np.sum(v * phi.grad(x), axis=1)
    return measure.expect(gen * psi(x) + 0.5 * np.sum(phi.grad(x) * psi.grad(x), axis=1))
