"""Empirical approximations of the invariant measure and its moment/tail bounds."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .drift_models import DriftModel, HypothesisParams
from .mc import MCEstimate, weighted_mean_se
from .sde_engine import SimConfig, simulate_paths

log = logging.getLogger(__name__)


class StationarityWarning(UserWarning):
    pass


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Weighted point cloud.  ``groups`` tags samples from the same trajectory."""

    samples: np.ndarray
    weights: np.ndarray
    provenance: dict = field(default_factory=dict)
    groups: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        w = np.asarray(self.weights, dtype=float)
        if s.shape[0] == 0 or w.shape != (s.shape[0],):
            raise ValueError("need one weight per sample and at least one sample")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        w = w / w.sum()
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, samples, provenance=None, groups=None):
        s = np.asarray(samples, dtype=float)
        n = s.shape[0]
        return cls(s, np.full(n, 1.0 / n), dict(provenance or {}), groups)

    @property
    def d(self):
        return self.samples.shape[1]

    def __len__(self):
        return self.samples.shape[0]

    @property
    def effective_size(self):
        return 1.0 / float(np.sum(self.weights**2))

    def expect(self, values) -> MCEstimate:
        """Weighted mean of per-sample ``values`` with a batch-means error."""
        m, se = weighted_mean_se(values, self.weights, self.groups)
        return MCEstimate(m, se, len(self))

    def mean(self, f) -> MCEstimate:
        return self.expect(f(self.samples))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["weight"] + [f"x_{i + 1}" for i in range(self.d)])
            for wt, x in zip(self.weights, self.samples):
                w.writerow([repr(float(wt))] + [repr(float(v)) for v in x])

    @classmethod
    def from_csv(cls, path, provenance=None):
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 1:], data[:, 0], dict(provenance or {"kind": "csv", "path": str(path)}))


# ---------------------------------------------------------------------------
# samplers


def sample_krylov_bogoliubov(model: DriftModel, x0, T, config: SimConfig, stride=1,
                             stream=0) -> EmpiricalMeasure:
    """Time-and-ensemble occupation measure ``(1/T) int_0^T law(X(t, x0)) dt``.

    States at steps ``0, stride, 2 stride, ... < T/dt`` of every path get equal
    weight (left Riemann sum of the time average, burn-in included).
    """
    if T < 10.0 / model.params.omega:
        log.info("Krylov-Bogoliubov horizon T=%g is shorter than 10 relaxation times", T)
    cfg = config.with_(t_final=float(T))
    K = cfg.n_steps
    steps = np.arange(0, K, int(stride))
    b = simulate_paths(model, x0, None, cfg, record=steps * cfg.dt, stream=stream).require_finite()
    n, R, d = b.X.shape
    groups = np.repeat(b.path_ids, R)
    return EmpiricalMeasure.uniform(
        b.X.reshape(n * R, d),
        {"kind": "krylov_bogoliubov", "T": float(T), "dt": cfg.dt, "stride": int(stride),
         "n_paths": n},
        groups,
    )


def sample_long_run(model: DriftModel, x0, burn_in, n_samples, thin, config: SimConfig,
                    stream=0, diagnostics=True) -> EmpiricalMeasure:
    """Samples at ``burn_in + j * thin`` along ``config.n_paths`` independent paths.

    Each path contributes ``ceil(n_samples / n_paths)`` states; the first
    ``n_samples`` in (time, path) order are kept so all paths weigh in equally.
    """
    if burn_in < 5.0 / model.params.omega:
        raise ValueError(f"burn_in must be at least 5/omega = {5.0 / model.params.omega:g}")
    if not thin > 0:
        raise ValueError("thin must be positive")
    n_samples = int(n_samples)
    n_paths = min(config.n_paths, n_samples)
    per_path = -(-n_samples // n_paths)
    times = burn_in + thin * np.arange(per_path)
    cfg = config.with_(t_final=float(times[-1]), n_paths=n_paths)
    b = simulate_paths(model, x0, None, cfg, record=times, stream=stream).require_finite()
    # (time, path) order
    pts = np.transpose(b.X, (1, 0, 2)).reshape(-1, model.d)[:n_samples]
    grp = np.tile(b.path_ids, per_path)[:n_samples]
    meas = EmpiricalMeasure.uniform(
        pts,
        {"kind": "long_run", "burn_in": float(burn_in), "thin": float(thin), "dt": cfg.dt,
         "n_paths": n_paths},
        grp,
    )
    if diagnostics and per_path >= 2:
        stationarity_check(meas)
    return meas


def stationarity_check(measure: EmpiricalMeasure, n_sigma=3.0):
    """Compare first and second halves on a small battery; warn on disagreement."""
    n = len(measure)
    half = n // 2
    if half < 2:
        return True
    fs = {
        "|x|^2": lambda x: np.sum(x * x, axis=1),
        "x_1": lambda x: x[:, 0],
        "cos(x_1)": lambda x: np.cos(x[:, 0]),
    }
    ok = True
    for name, f in fs.items():
        a = MCEstimate.from_samples(f(measure.samples[:half]))
        b = MCEstimate.from_samples(f(measure.samples[half:]))
        se = math.hypot(a.std_error, b.std_error)
        if abs(a.value - b.value) > n_sigma * se:
            ok = False
            warnings.warn(f"halves of the run disagree on E[{name}]: {a.value:.4g} vs {b.value:.4g}",
                          StationarityWarning, stacklevel=3)
    return ok


# ---------------------------------------------------------------------------
# bounds


def moment_bound_constant(params: HypothesisParams, m) -> float:
    """Upper bound ``A_m`` for the stationary moment ``E|X|^(2m)``.

    ``A_1 = (2a + d) / omega``; for ``m > 1`` the steady state of the moment
    inequality gives ``A_m = (2a + 2m - 2 + d) / (2 omega) * A_{m-1}``.
    """
    m = int(m)
    if m < 1:
        raise ValueError("m must be >= 1")
    w, a, d = params.omega, params.a, params.d
    A = (2 * a + d) / w
    for j in range(2, m + 1):
        A *= (2 * a + 2 * j - 2 + d) / (2 * w)
    return A


@dataclass(frozen=True)
class BoundCheck:
    label: str
    estimate: MCEstimate
    bound: float
    n_sigma: float = 4.0

    @property
    def passed(self):
        return self.estimate.value <= self.bound + self.n_sigma * self.estimate.std_error


def check_moments(measure: EmpiricalMeasure, params: HypothesisParams, m_max, n_sigma=4.0):
    """``int |x|^(2m) dnu <= A_m`` for ``m = 1..m_max``."""
    r2 = np.sum(measure.samples**2, axis=1)
    out = []
    for m in range(1, int(m_max) + 1):
        est = measure.expect(r2**m)
        out.append(BoundCheck(f"m={m}", est, moment_bound_constant(params, m), n_sigma))
    return out


def check_tail_bound(model: DriftModel, x0, t, r, config: SimConfig, n_sigma=4.0,
                     stream=0) -> BoundCheck:
    """``P(|X(t, x0)| >= r) <= (|x0|^2 + A_1) / r^2`` with a binomial error."""
    if not r > 0 or not t > 0:
        raise ValueError("need r > 0 and t > 0")
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    cfg = config.with_(t_final=float(t))
    b = simulate_paths(model, x0, None, cfg, record="final", stream=stream).require_finite()
    hit = np.linalg.norm(b.X[:, -1], axis=1) >= r
    n = hit.size
    p = float(hit.mean())
    est = MCEstimate(p, math.sqrt(p * (1 - p) / n), n)
    bound = (float(x0 @ x0) + moment_bound_constant(model.params, 1)) / r**2
    return BoundCheck(f"x0={x0.tolist()},t={t:g},r={r:g}", est, bound, n_sigma)


def check_transient_moments(model: DriftModel, x0, t_grid, m_max, config: SimConfig, rate=2.0,
                            n_sigma=4.0, stream=0):
    """``E|X(t, x0)|^(2m) <= exp(-rate m omega t) |x0|^(2m) + A_m`` along a time grid.

    ``rate=2`` is the decay claimed for every m; it holds for m = 1 but for
    m >= 2 only at moderate |x0| (the OU fourth moment has a cross term
    ``6 e^{-2t} x0^2 var_t`` that no constant absorbs).  ``rate=1`` is the weaker
    form that survives this cross term for the built-in models.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    times = np.array(sorted(float(t) for t in t_grid))
    cfg = config.with_(t_final=float(times[-1]))
    b = simulate_paths(model, x0, None, cfg, record=times, stream=stream).require_finite()
    r2x = float(x0 @ x0)
    out = []
    for k, t in enumerate(times):
        r2 = np.sum(b.X[:, k] ** 2, axis=1)
        for m in range(1, int(m_max) + 1):
            bound = math.exp(-rate * m * model.params.omega * t) * r2x**m \
                + moment_bound_constant(model.params, m)
            out.append(BoundCheck(f"t={t:g},m={m}", MCEstimate.from_samples(r2**m), bound, n_sigma))
    return out


def invariance_residual(model: DriftModel, measure: EmpiricalMeasure, phi, delta_t,
                        config: SimConfig, stream=0) -> MCEstimate:
    """Paired estimate of ``int P_delta phi dnu - int phi dnu``.

    One path of length ``delta_t`` starts from every sample, so the per-sample
    difference ``phi(X(delta_t, x_i)) - phi(x_i)`` is averaged with the
    measure's weights and groups.
    """
    cfg = config.with_(t_final=float(delta_t), n_paths=len(measure))
    b = simulate_paths(model, measure.samples, None, cfg, record="final", stream=stream).require_finite()
    return measure.expect(phi(b.X[:, -1]) - phi(measure.samples))
