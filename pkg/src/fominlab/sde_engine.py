"""Euler simulation of ``dX = b(X) dt + dW`` together with its tangent flow.

Along each path the engine carries

* ``X``      the state,
* ``eta``    the derivative of ``x -> X(t, x)`` in direction ``h``
             (``d eta / dt = b'(X) eta``, ``eta(0) = h``),
* ``beta``   ``int_0^t V(X(s)) ds`` with ``V(x) = K (1 + |x|^(2N))``,
* ``ito``    ``int_0^t <eta(s), dW(s)>``,

all with left-endpoint (non-anticipating) rules.  Two extra running integrals,
``int <V'(X), eta> ds`` and ``int s <V'(X), eta> ds``, make the weighted
integral ``int_0^t (1 - s/t) <V'(X), eta> ds`` available at every recorded t.

Randomness is counter based: the increment of path ``p`` at step ``k`` is a
pure function of ``(seed, stream, k, p)``, so a path comes out the same no
matter how paths are batched or scheduled.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import ndtri

from .drift_models import DriftModel, potential_V, potential_grad, tame_drift
from .errors import DivergenceError

log = logging.getLogger(__name__)

SCHEMES = ("euler_maruyama", "tamed_euler")
WORKERS_ENV = "FOMINLAB_WORKERS"

_MASK64 = (1 << 64) - 1
_STEP_BITS = 40
_MAX_STREAM = 1 << 24


@dataclass(frozen=True)
class SimConfig:
    dt: float
    t_final: float
    n_paths: int = 1000
    seed: int = 0
    scheme: str = "tamed_euler"
    taming_n: Optional[int] = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.t_final > 0:
            raise ValueError(f"t_final must be positive, got {self.t_final}")
        if self.dt > self.t_final * (1 + 1e-12):
            raise ValueError("dt must not exceed t_final")
        if self.n_paths < 1:
            raise ValueError("n_paths must be positive")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        steps = self.t_final / self.dt
        if abs(round(steps) * self.dt - self.t_final) > 1e-12 * self.t_final + 1e-15:
            raise ValueError(f"t_final={self.t_final} is not a whole number of steps of dt={self.dt}")

    @property
    def n_steps(self):
        return int(round(self.t_final / self.dt))

    def step_index(self, t):
        k = int(round(t / self.dt))
        if abs(k * self.dt - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not on the grid of step {self.dt}")
        return k

    def with_(self, **changes):
        return replace(self, **changes)

    def stepping_model(self, model: DriftModel) -> DriftModel:
        if self.scheme == "euler_maruyama":
            return model
        n = self.taming_n if self.taming_n is not None else max(1, int(round(1.0 / self.dt)))
        return tame_drift(model, n)


# ---------------------------------------------------------------------------
# randomness


def _bitgen(seed, stream, step):
    if not 0 <= stream < _MAX_STREAM:
        raise ValueError(f"stream must be in [0, {_MAX_STREAM})")
    if not 0 <= step < (1 << _STEP_BITS):
        raise ValueError("step index out of range")
    key = np.array([int(seed) & _MASK64, (int(stream) << _STEP_BITS) | int(step)], dtype=np.uint64)
    return np.random.Philox(key=key)


def increments_block(seed, step, path_start, n_paths, d, dt, stream=0):
    """Increments of one time step for paths ``path_start .. path_start + n_paths - 1``.

    Returns an array of shape ``(n_paths, d)`` of N(0, dt I) vectors.
    """
    j0 = int(path_start) * d
    blk, off = divmod(j0, 4)
    bg = _bitgen(seed, stream, step)
    if blk:
        bg.advance(blk)
    raw = bg.random_raw(n_paths * d + off)[off:]
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * (2.0**-53)
    return ndtri(u).reshape(n_paths, d) * math.sqrt(dt)


def brownian_block(seed, path_start, n_paths, n_steps, dt, d, stream=0, start_step=0):
    """Increments for a contiguous block of paths, shape ``(n_steps, n_paths, d)``."""
    if n_steps < 1 or not dt > 0:
        raise ValueError("need n_steps >= 1 and dt > 0")
    out = np.empty((n_steps, n_paths, d))
    for k in range(n_steps):
        out[k] = increments_block(seed, start_step + k, path_start, n_paths, d, dt, stream)
    return out


def brownian_increments(seed, path_index, n_steps, dt, d, stream=0, start_step=0):
    """Increments of a single path, shape ``(n_steps, d)``."""
    return brownian_block(seed, path_index, 1, n_steps, dt, d, stream, start_step)[:, 0, :]


# ---------------------------------------------------------------------------
# path containers


@dataclass(frozen=True)
class PathBundle:
    times: np.ndarray
    X: np.ndarray
    eta: Optional[np.ndarray]
    beta: np.ndarray
    ito: np.ndarray
    x0: np.ndarray
    h: Optional[np.ndarray]
    diverged: bool = False

    def to_csv(self, path):
        d = self.X.shape[1]
        header = ["t"] + [f"X_{i + 1}" for i in range(d)]
        if self.eta is not None:
            header += [f"eta_{i + 1}" for i in range(d)]
        header += ["beta", "ito"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k, t in enumerate(self.times):
                row = [repr(float(t))] + [repr(float(v)) for v in self.X[k]]
                if self.eta is not None:
                    row += [repr(float(v)) for v in self.eta[k]]
                row += [repr(float(self.beta[k])), repr(float(self.ito[k]))]
                w.writerow(row)


@dataclass(frozen=True)
class PathBatch:
    """Recorded states of ``n`` paths at ``R`` recorded times (arrays are path-major)."""

    times: np.ndarray  # (R,)
    X: np.ndarray  # (n, R, d)
    eta: Optional[np.ndarray]  # (n, R, d)
    beta: np.ndarray  # (n, R)
    ito: np.ndarray  # (n, R)
    vgrad_int: np.ndarray  # (n, R): int_0^t <V'(X), eta> ds
    svgrad_int: np.ndarray  # (n, R): int_0^t s <V'(X), eta> ds
    x0: np.ndarray  # (n, d)
    h: Optional[np.ndarray]  # (n, d)
    path_ids: np.ndarray
    diverged: np.ndarray
    model_name: str = ""
    config: Optional[SimConfig] = field(default=None, repr=False)

    def __len__(self):
        return self.X.shape[0]

    def __getitem__(self, i) -> PathBundle:
        return PathBundle(
            times=self.times,
            X=self.X[i],
            eta=None if self.eta is None else self.eta[i],
            beta=self.beta[i],
            ito=self.ito[i],
            x0=self.x0[i],
            h=None if self.h is None else self.h[i],
            diverged=bool(self.diverged[i]),
        )

    @property
    def d(self):
        return self.X.shape[2]

    def index_of(self, t):
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise KeyError(f"time {t} was not recorded")
        return k

    def require_finite(self):
        if np.any(self.diverged):
            bad = self.path_ids[self.diverged]
            raise DivergenceError(
                f"{int(bad.size)} of {len(self)} paths diverged (first ids: {bad[:5].tolist()})", bad
            )
        return self

    def weighted_vgrad(self, k):
        """``int_0^t (1 - s/t) <V'(X(s)), eta(s)> ds`` at recorded index ``k``."""
        t = self.times[k]
        if t <= 0:
            return np.zeros(len(self))
        return self.vgrad_int[:, k] - self.svgrad_int[:, k] / t


# ---------------------------------------------------------------------------
# integration


def _integrate(step_model, base_model, x0s, h, dt, seed, stream, path_start, k_start, k_end,
               rec_steps, increments=None):
    """Advance ``x0s`` (n, d) from step ``k_start`` to ``k_end``.

    ``rec_steps`` must be sorted and lie in ``[k_start, k_end]``.  ``increments``,
    if given, holds the Brownian increments for steps ``k_start .. k_end - 1``.
    """
    n, d = x0s.shape
    R = len(rec_steps)
    X = x0s.astype(float, copy=True)
    want_eta = h is not None
    eta = h.astype(float, copy=True) if want_eta else None
    beta = np.zeros(n)
    ito = np.zeros(n)
    A = np.zeros(n)
    B = np.zeros(n)
    diverged = np.zeros(n, dtype=bool)

    out_X = np.empty((n, R, d))
    out_eta = np.empty((n, R, d)) if want_eta else None
    out_beta = np.empty((n, R))
    out_ito = np.zeros((n, R))
    out_A = np.zeros((n, R))
    out_B = np.zeros((n, R))

    r = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(k_start, k_end + 1):
            while r < R and rec_steps[r] == k:
                out_X[:, r] = X
                out_beta[:, r] = beta
                if want_eta:
                    out_eta[:, r] = eta
                    out_ito[:, r] = ito
                    out_A[:, r] = A
                    out_B[:, r] = B
                r += 1
            if k == k_end:
                break
            if increments is not None:
                dW = increments[k - k_start]
            else:
                dW = increments_block(seed, k, path_start, n, d, dt, stream)
            drift = step_model.drift(X)
            beta += potential_V(base_model, X) * dt
            if want_eta:
                s = k * dt
                g = np.einsum("ni,ni->n", potential_grad(base_model, X), eta)
                A += g * dt
                B += s * g * dt
                ito += np.einsum("ni,ni->n", eta, dW)
                J = step_model.jacobian(X)
                eta = eta + np.einsum("nij,nj->ni", J, eta) * dt
            X = X + drift * dt + dW
            bad = ~np.isfinite(X).all(axis=1)
            if bad.any():
                diverged |= bad
    return out_X, out_eta, out_beta, out_ito, out_A, out_B, diverged


def _resolve_record(record, config: SimConfig):
    K = config.n_steps
    if isinstance(record, str):
        if record == "all":
            return np.arange(K + 1)
        if record == "final":
            return np.array([K])
        raise ValueError(f"unknown record mode {record!r}")
    steps = sorted({config.step_index(float(t)) for t in np.atleast_1d(record)})
    if steps[0] < 0 or steps[-1] > K:
        raise ValueError("record times must lie in [0, t_final]")
    return np.array(steps)


def default_workers():
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def simulate_paths(model: DriftModel, x0, h, config: SimConfig, *, record="all", stream=0,
                   path_start=0, chunk_size=None, workers=None) -> PathBatch:
    """Simulate ``config.n_paths`` paths from ``x0`` with tangent direction ``h``.

    ``x0`` is a point (d,) or one start point per path (n, d).  ``h=None`` skips
    the tangent flow and the Ito integral.  ``record`` is ``"all"``, ``"final"``
    or a sequence of grid times.  Diverged paths are flagged in
    ``PathBatch.diverged``, never dropped.
    """
    d = model.d
    n = config.n_paths
    x0 = np.asarray(x0, dtype=float)
    x0s = np.broadcast_to(x0.reshape(-1, d) if x0.ndim > 1 else x0.reshape(1, d), (n, d)).copy()
    if not np.all(np.isfinite(x0s)):
        raise ValueError("x0 must be finite")
    hs = None
    if h is not None:
        h = np.asarray(h, dtype=float)
        hs = np.broadcast_to(h.reshape(-1, d) if h.ndim > 1 else h.reshape(1, d), (n, d)).copy()
        if not np.all(np.isfinite(hs)):
            raise ValueError("h must be finite")
    rec = _resolve_record(record, config)
    step_model = config.stepping_model(model)
    K = config.n_steps

    if chunk_size is None:
        chunk_size = n
    bounds = [(i, min(n, i + chunk_size)) for i in range(0, n, chunk_size)]

    def run(lo_hi):
        lo, hi = lo_hi
        return _integrate(step_model, model, x0s[lo:hi], None if hs is None else hs[lo:hi],
                          config.dt, config.seed, stream, path_start + lo, 0, K, rec)

    workers = default_workers() if workers is None else workers
    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, bounds))
    else:
        parts = [run(b) for b in bounds]

    cat = lambda i: np.concatenate([p[i] for p in parts]) if parts[0][i] is not None else None
    batch = PathBatch(
        times=rec * config.dt,
        X=cat(0),
        eta=cat(1),
        beta=cat(2),
        ito=cat(3),
        vgrad_int=cat(4),
        svgrad_int=cat(5),
        x0=x0s,
        h=hs,
        path_ids=np.arange(path_start, path_start + n),
        diverged=cat(6),
        model_name=model.name,
        config=config,
    )
    if batch.diverged.any():
        log.warning("%s: %d of %d paths diverged", model.name, int(batch.diverged.sum()), n)
    return batch


def continue_paths(model: DriftModel, starts, config: SimConfig, k_start, k_end, *, stream=0,
                   path_start=0, increments=None):
    """Restart paths from per-path states at step ``k_start`` and return states at ``k_end``.

    Uses the same increments as a full run with the same ``(seed, stream)``,
    so perturbed restarts share the noise of the original paths.
    """
    starts = np.asarray(starts, dtype=float)
    step_model = config.stepping_model(model)
    if k_end == k_start:
        return starts.copy(), np.zeros(starts.shape[0], dtype=bool)
    out = _integrate(step_model, model, starts, None, config.dt, config.seed, stream, path_start,
                     k_start, k_end, np.array([k_end]), increments)
    return out[0][:, 0, :], out[6]


# ---------------------------------------------------------------------------
# tangent-flow bound


@dataclass(frozen=True)
class EtaBoundReport:
    worst_ratio: float
    tol_disc: float
    n_paths: int

    @property
    def passed(self):
        return self.worst_ratio <= 1.0 + self.tol_disc


def default_tol_disc(dt, c=20.0):
    """Discretisation slack for the tangent bound, ``c * dt`` (0.02 at dt = 1e-3)."""
    return c * dt


def check_eta_bound(bundle, tol_disc) -> EtaBoundReport:
    """``max_k exp(-beta_k) |eta_k| / |h|`` over a path or a whole batch.

    Paths with ``h = 0`` pass vacuously and are excluded from the maximum.
    """
    eta = bundle.eta
    if eta is None:
        raise ValueError("bundle has no tangent flow")
    if eta.ndim == 2:
        eta, beta, h = eta[None], bundle.beta[None], np.asarray(bundle.h)[None]
    else:
        beta, h = bundle.beta, bundle.h
    hn = np.linalg.norm(h, axis=-1)
    live = hn > 0
    if not live.any():
        return EtaBoundReport(0.0, tol_disc, 0)
    ratio = np.exp(-beta[live]) * np.linalg.norm(eta[live], axis=-1) / hn[live, None]
    return EtaBoundReport(float(np.max(ratio)), float(tol_disc), int(live.sum()))
