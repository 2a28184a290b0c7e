"""Monte Carlo summaries."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MCEstimate:
    value: float
    std_error: float
    n_samples: int

    @classmethod
    def from_samples(cls, samples):
        """Sample mean with two-pass standard error ``std / sqrt(n)``."""
        x = np.asarray(samples, dtype=float).ravel()
        n = x.size
        if n == 0:
            raise ValueError("no samples")
        mean = float(np.mean(x))
        if n == 1:
            return cls(mean, 0.0, 1)
        dev = x - mean
        var = float(np.dot(dev, dev)) / (n - 1)
        return cls(mean, math.sqrt(var / n), n)

    @classmethod
    def combine(cls, a: "MCEstimate", b: "MCEstimate", sign=1.0):
        """``a + sign * b`` for independent estimates."""
        return cls(a.value + sign * b.value, math.hypot(a.std_error, b.std_error),
                   min(a.n_samples, b.n_samples))

    def within(self, target, n_sigma=4.0, extra=0.0):
        return abs(self.value - target) <= n_sigma * self.std_error + extra

    def as_dict(self):
        return {"value": self.value, "std_error": self.std_error, "n_samples": self.n_samples}


def weighted_mean_se(values, weights=None, groups=None):
    """Weighted mean and its standard error.

    With ``groups`` the error is computed from group totals (batch means), which
    is what makes it honest for correlated samples taken along one trajectory.
    Without groups every sample is its own group.
    """
    f = np.asarray(values, dtype=float)
    n = f.shape[0]
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    mean = float(np.dot(w, f))
    if groups is None:
        if n < 2:
            return mean, 0.0
        resid = w * (f - mean)
        n_groups = n
    else:
        groups = np.asarray(groups)
        _, inv = np.unique(groups, return_inverse=True)
        n_groups = int(inv.max()) + 1
        if n_groups < 2:
            return mean, 0.0
        resid = np.bincount(inv, weights=w * (f - mean), minlength=n_groups)
    var = float(np.dot(resid, resid)) * n_groups / (n_groups - 1)
    return mean, math.sqrt(var)
