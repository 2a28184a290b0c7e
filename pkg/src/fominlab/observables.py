"""Bounded test functions with analytic derivatives.

All callables are vectorised over a leading batch axis: ``phi`` maps
``(..., d) -> (...)``, ``grad`` maps ``(..., d) -> (..., d)`` and ``hessian``
maps ``(..., d) -> (..., d, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class TestFunction:
    __test__ = False  # not a pytest class

    label: str
    phi: Callable
    grad: Callable
    sup_norm: float
    hessian: Optional[Callable] = None

    def __call__(self, x):
        return self.phi(np.asarray(x, dtype=float))

    def scaled(self, alpha, label=None):
        h = None if self.hessian is None else (lambda x: alpha * self.hessian(x))
        return TestFunction(label or f"{alpha:g}*{self.label}", lambda x: alpha * self.phi(x),
                            lambda x: alpha * self.grad(x), abs(alpha) * self.sup_norm, h)


@dataclass(frozen=True)
class VectorField:
    """``F = sum_h f_h e_h`` with components in the standard basis."""

    components: Sequence[TestFunction]

    @property
    def d(self):
        return len(self.components)

    def __call__(self, x):
        return np.stack([f(x) for f in self.components], axis=-1)

    def divergence(self, x):
        x = np.asarray(x, dtype=float)
        return sum(f.grad(x)[..., i] for i, f in enumerate(self.components))


def _vec(k, d=None):
    k = np.atleast_1d(np.asarray(k, dtype=float))
    if d is not None and k.shape != (d,):
        raise ValueError(f"expected a vector of length {d}")
    return k


def _fmt(v):
    return ",".join(f"{c:g}" for c in v)


def sin_wave(k) -> TestFunction:
    k = _vec(k)
    return TestFunction(
        f"sin[{_fmt(k)}]",
        lambda x: np.sin(x @ k),
        lambda x: np.cos(x @ k)[..., None] * k,
        1.0,
        lambda x: -np.sin(x @ k)[..., None, None] * np.outer(k, k),
    )


def cos_wave(k) -> TestFunction:
    k = _vec(k)
    return TestFunction(
        f"cos[{_fmt(k)}]",
        lambda x: np.cos(x @ k),
        lambda x: -np.sin(x @ k)[..., None] * k,
        1.0,
        lambda x: -np.cos(x @ k)[..., None, None] * np.outer(k, k),
    )


def tanh_ridge(u) -> TestFunction:
    u = _vec(u)

    def grad(x):
        s = 1.0 / np.cosh(x @ u)
        return (s * s)[..., None] * u

    def hess(x):
        y = x @ u
        s = 1.0 / np.cosh(y)
        return (-2.0 * s * s * np.tanh(y))[..., None, None] * np.outer(u, u)

    return TestFunction(f"tanh[{_fmt(u)}]", lambda x: np.tanh(x @ u), grad, 1.0, hess)


def gaussian_bump(c) -> TestFunction:
    c = _vec(c)
    d = c.size

    def phi(x):
        y = x - c
        return np.exp(-np.sum(y * y, axis=-1))

    def grad(x):
        return -2.0 * (x - c) * phi(x)[..., None]

    def hess(x):
        y = x - c
        outer = y[..., :, None] * y[..., None, :]
        return (4.0 * outer - 2.0 * np.eye(d)) * phi(x)[..., None, None]

    return TestFunction(f"bump[{_fmt(c)}]", phi, grad, 1.0, hess)


def constant(c, d) -> TestFunction:
    return TestFunction(
        f"const[{c:g}]",
        lambda x: np.full(np.shape(x)[:-1], float(c)),
        lambda x: np.zeros(np.shape(x)),
        abs(float(c)),
        lambda x: np.zeros(np.shape(x) + (d,)),
    )


def canonical_battery(d) -> list:
    """Bounded test functions with bounded derivatives used for the C_p scan.

    Waves ``sin/cos(<k, x>)`` for ``k`` in ``{0.5, 1, 2} e_i``, ridges
    ``tanh(<u, x>)`` for unit ``u`` (coordinate axes, plus the diagonal when
    d > 1) and bumps ``exp(-|x - c|^2)`` at ``c`` in ``{0, e_1, -e_1}``.
    The order interleaves families so any prefix is a mixed sample.
    """
    eye = np.eye(d)
    waves_sin, waves_cos = [], []
    for i in range(d):
        for f in (0.5, 1.0, 2.0):
            waves_sin.append(sin_wave(f * eye[i]))
            waves_cos.append(cos_wave(f * eye[i]))
    ridges = [tanh_ridge(eye[i]) for i in range(d)]
    if d > 1:
        ridges.append(tanh_ridge(np.ones(d) / np.sqrt(d)))
    bumps = [gaussian_bump(np.zeros(d)), gaussian_bump(eye[0]), gaussian_bump(-eye[0])]

    families = [waves_sin, waves_cos, ridges, bumps]
    out = []
    while any(families):
        for fam in families:
            if fam:
                out.append(fam.pop(0))
    return out


def battery_by_labels(d, labels) -> list:
    table = {tf.label: tf for tf in canonical_battery(d)}
    missing = [l for l in labels if l not in table]
    if missing:
        raise KeyError(f"unknown test functions {missing}; available: {sorted(table)}")
    return [table[l] for l in labels]


def check_test_function(tf: TestFunction, grid, rel_tol=1e-6, delta=1e-5):
    """Verify the sup bound and the analytic gradient against central differences."""
    grid = np.asarray(grid, dtype=float)
    vals = tf(grid)
    ok_sup = bool(np.all(np.abs(vals) <= tf.sup_norm * (1 + 1e-12)))
    d = grid.shape[-1]
    g = tf.grad(grid)
    fd = np.empty_like(g)
    for i in range(d):
        e = np.zeros(d)
        e[i] = delta
        fd[..., i] = (tf(grid + e) - tf(grid - e)) / (2 * delta)
    scale = np.maximum(1.0, np.abs(g))
    err = float(np.max(np.abs(fd - g) / scale))
    return ok_sup and err <= rel_tol, err


_FAMILIES = {"sin": sin_wave, "cos": cos_wave, "tanh": tanh_ridge, "bump": gaussian_bump}


def parse_test_function(label, d) -> TestFunction:
    """Build a test function from a label such as ``"sin[1,0]"`` or ``"const[2]"``.

    A single number for a vector family in d > 1 means that multiple of ``e_1``.
    """
    label = str(label).strip()
    if not label.endswith("]") or "[" not in label:
        raise ValueError(f"malformed test function label {label!r}")
    fam, arg = label[:-1].split("[", 1)
    try:
        vals = [float(v) for v in arg.split(",")] if arg.strip() else []
    except ValueError:
        raise ValueError(f"malformed test function label {label!r}") from None
    if fam == "const":
        if len(vals) != 1:
            raise ValueError("const takes one value")
        return constant(vals[0], d)
    if fam not in _FAMILIES:
        raise ValueError(f"unknown test function family {fam!r}; use one of {sorted(_FAMILIES) + ['const']}")
    if len(vals) == 1 and d > 1:
        vals = vals + [0.0] * (d - 1)
    return _FAMILIES[fam](_vec(vals, d))
