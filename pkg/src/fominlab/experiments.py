"""Named verification suites run by the command line front end.

Each experiment receives a resolved :class:`ExperimentConfig` and returns a
list of check dicts plus optional CSV exports.  A check carries ``name``,
``paper_anchor`` (the statement it verifies), ``value``, ``std_error``,
``bound`` and ``pass``; comparisons against an exact value report the
absolute deviation as ``value`` and keep the raw ``estimate`` and ``target``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import expm

from . import drift_models as dm
from .errors import ConfigError
from .fomin_calculus import (adjointness_residual, dirichlet_residual, estimate_Cp, fit_score,
                             generalized_ou_apply, ibp_residual, oracle_score, score_lp_norms,
                             score_relative_error)
from .invariant_measure import (check_moments, check_tail_bound, sample_krylov_bogoliubov,
                                sample_long_run)
from .mc import MCEstimate
from .observables import VectorField, canonical_battery, parse_test_function, tanh_ridge
from .sde_engine import SimConfig, check_eta_bound, simulate_paths
from .semigroup import (check_commutation_identity, check_voc_identity, compare_bel_fd,
                        estimate_DPt_fd, scan_small_t_singularity)


@dataclass
class Outcome:
    checks: list = field(default_factory=list)
    exports: dict = field(default_factory=dict)  # filename -> writer(path)

    def add(self, name, anchor, value, bound, passed, std_error=0.0, **extra):
        self.checks.append({"name": name, "paper_anchor": anchor, "value": float(value),
                            "std_error": float(std_error), "bound": float(bound),
                            "pass": bool(passed), **extra})

    def add_target(self, name, anchor, est: MCEstimate, target, tol):
        dev = abs(est.value - target)
        self.add(name, anchor, dev, tol, dev <= tol, est.std_error,
                 estimate=est.value, target=float(target))


@dataclass(frozen=True)
class Experiment:
    name: str
    anchor: str
    run: Callable
    knobs: dict
    sim: dict


REGISTRY: dict = {}

SAMPLING_KNOBS = {"x0": None, "method": "long_run", "burn_in": 5.0, "n_samples": 100_000,
                  "thin": 1.0, "T": 50.0, "stride": 100}
SAMPLING_SIM = {"dt": 0.005, "n_paths": 100_000}


def experiment(name, anchor, knobs, sim):
    def deco(fn):
        REGISTRY[name] = Experiment(name, anchor, fn, knobs, sim)
        return fn
    return deco


def list_experiments():
    return [(e.name, e.anchor) for e in REGISTRY.values()]


# ---------------------------------------------------------------------------
# helpers


def build_model(cfg):
    try:
        return dm.get_model(cfg.model["name"], **cfg.model["params"])
    except KeyError as exc:
        raise ConfigError(f"model.name: {exc.args[0]}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model.params: {exc}") from None


def sim_config(cfg, t_final=1.0):
    s = cfg.sim
    return SimConfig(dt=float(s["dt"]), t_final=float(t_final), n_paths=int(s["n_paths"]),
                     seed=cfg.seed, scheme=s["scheme"], taming_n=s["taming_n"])


def _vec(v, d, default=0.0, key="x"):
    if v is None:
        return np.full(d, float(default))
    a = np.atleast_1d(np.asarray(v, dtype=float)).reshape(-1)
    if a.size == 1 and d > 1:
        a = np.concatenate([a, np.zeros(d - 1)])
    if a.size != d:
        raise ConfigError(f"knobs.{key} must have {d} components")
    return a


def _tf(label, d, key):
    try:
        return parse_test_function(label, d)
    except ValueError as exc:
        raise ConfigError(f"knobs.{key}: {exc}") from None


def _directions(v, d):
    if v is None:
        return list(np.eye(d))
    return [_vec(z, d, key="directions") for z in v]


def _sample(model, cfg, k):
    x0 = _vec(k["x0"], model.d, key="x0")
    sim = sim_config(cfg)
    if k["method"] == "long_run":
        return sample_long_run(model, x0, float(k["burn_in"]), int(k["n_samples"]), float(k["thin"]), sim)
    if k["method"] == "krylov_bogoliubov":
        return sample_krylov_bogoliubov(model, x0, float(k["T"]), sim, stride=int(k["stride"]))
    raise ConfigError(f"knobs.method must be 'long_run' or 'krylov_bogoliubov', got {k['method']!r}")


def exact_wave_gradient(model, k, x, h, t):
    """``<D P_t sin(<k, .>)(x), h>`` for a linear drift (Gaussian transition law)."""
    mean, cov = model.oracle.transition_moments(x, t)
    k = np.asarray(k, dtype=float)
    dm_h = expm(t * model.oracle.linear_matrix) @ np.asarray(h, dtype=float)
    return math.cos(k @ mean) * math.exp(-0.5 * k @ cov @ k) * float(k @ dm_h)


def _has_density(model):
    o = model.oracle
    return o is not None and o.log_density is not None


# ---------------------------------------------------------------------------
# experiments


@experiment("hypothesis_check", "dissipativity condition and drift growth bound",
            {"radius": 10.0, "n_points": 10_000}, {"dt": 0.001, "n_paths": 1000})
def run_hypothesis_check(cfg, model, out: Outcome):
    tol = cfg.tolerances["hypothesis_tol"]
    grid = dm.default_grid(model.d, float(cfg.knobs["radius"]), int(cfg.knobs["n_points"]), cfg.seed)
    rep = dm.check_hypothesis(model, grid, tol)
    out.add("dissipativity slack", "dissipativity condition", rep.dissipativity_slack, -tol,
            rep.dissipativity_ok, argmin=rep.dissipativity_argmin.tolist())
    out.add("growth slack", "drift growth bound", rep.growth_slack, -tol, rep.growth_ok,
            argmin=rep.growth_argmin.tolist())


@experiment("moments", "stationary moment bound",
            {**SAMPLING_KNOBS, "m_max": 2}, SAMPLING_SIM)
def run_moments(cfg, model, out: Outcome):
    k, tol = cfg.knobs, cfg.tolerances
    meas = _sample(model, cfg, k)
    for bc in check_moments(meas, model.params, int(k["m_max"]), tol["n_sigma"]):
        out.add(f"E|X|^2m {bc.label} <= A_m", "stationary moment bound", bc.estimate.value,
                bc.bound, bc.passed, bc.estimate.std_error)
    if _has_density(model) and model.d == 1:
        abs_tol = tol["moment_abs"]
        for m in range(1, int(k["m_max"]) + 1):
            exact = model.oracle.stationary_expectation(lambda x, m=m: x ** (2 * m))
            est = meas.mean(lambda x, m=m: np.sum(x * x, axis=1) ** m)
            t = abs_tol[min(m - 1, len(abs_tol) - 1)] if isinstance(abs_tol, list) else abs_tol
            out.add_target(f"E|X|^2m m={m} vs exact", "stationary moment bound", est, exact, t)


@experiment("tail", "tail probability bound",
            {"cases": [[0.0, 5.0, 1.0], [0.0, 5.0, 2.0], [1.0, 1.0, 1.0], [2.0, 0.5, 1.5], [3.0, 0.2, 2.0]],
             "stationary": {"t": 5.0, "r": 1.0}},
            {"dt": 0.005, "n_paths": 100_000})
def run_tail(cfg, model, out: Outcome):
    tol = cfg.tolerances
    sim = sim_config(cfg)
    for i, case in enumerate(cfg.knobs["cases"]):
        if len(case) != 3:
            raise ConfigError(f"knobs.cases[{i}] must be [x0, t, r]")
        x0 = _vec(case[0], model.d, key="cases")
        bc = check_tail_bound(model, x0, float(case[1]), float(case[2]), sim, tol["n_sigma"], stream=i)
        out.add(f"P(|X|>=r) {bc.label}", "tail probability bound", bc.estimate.value, bc.bound,
                bc.passed, bc.estimate.std_error)
    st = cfg.knobs["stationary"]
    if st and _has_density(model) and model.d == 1:
        r = float(st["r"])
        bc = check_tail_bound(model, np.zeros(model.d), float(st["t"]), r, sim, tol["n_sigma"],
                              stream=len(cfg.knobs["cases"]))
        exact = model.oracle.stationary_expectation(lambda x: float(abs(x) >= r))
        out.add_target(f"stationary P(|X|>={r:g}) vs exact", "tail probability bound", bc.estimate,
                       exact, tol["tail_abs"])


@experiment("semigroup_identities", "variation-of-constants and gradient commutation identities",
            {"x": None, "h": None, "t": 0.5, "n_quad": 16, "phi": "sin[1]",
             "identities": ["variation_of_constants", "commutation"]},
            {"dt": 0.005, "n_paths": 20_000})
def run_semigroup_identities(cfg, model, out: Outcome):
    k, ns = cfg.knobs, cfg.tolerances["n_sigma"]
    x = _vec(k["x"], model.d, key="x")
    h = _vec(k["h"] if k["h"] is not None else 1.0, model.d, key="h")
    phi = _tf(k["phi"], model.d, "phi")
    t = float(k["t"])
    sim = sim_config(cfg, t)
    anchors = {"variation_of_constants": "variation-of-constants identity",
               "commutation": "gradient commutation identity"}
    for name in k["identities"]:
        if name == "variation_of_constants":
            rep = check_voc_identity(model, phi, x, t, sim, int(k["n_quad"]), ns)
        elif name == "commutation":
            rep = check_commutation_identity(model, phi, x, h, t, sim, int(k["n_quad"]), n_sigma=ns)
        else:
            raise ConfigError(f"knobs.identities: unknown identity {name!r}")
        out.add(f"{name} residual", anchors[name], abs(rep.residual),
                ns * rep.std_error + rep.tolerance, rep.passed, rep.std_error,
                lhs=rep.lhs.value, rhs=rep.rhs.value, quadrature_tol=rep.tolerance)


@experiment("bel_check", "BEL gradient formula for the Feynman-Kac semigroup",
            {"x": None, "h": None, "times": [0.25, 0.5, 1.0], "phis": ["sin[1]", "tanh[1]"],
             "delta": None, "eta_paths": 1000, "eta_dt": 0.001, "eta_t": 1.0,
             "exact_anchor": {"phi": "sin[1]", "t": 1.0}},
            {"dt": 0.005, "n_paths": 20_000})
def run_bel_check(cfg, model, out: Outcome):
    k, tol = cfg.knobs, cfg.tolerances
    ns = tol["n_sigma"]
    x = _vec(k["x"], model.d, key="x")
    h = _vec(k["h"] if k["h"] is not None else 1.0, model.d, key="h")
    times = sorted(float(t) for t in k["times"])
    sim = sim_config(cfg, times[-1])
    for i, label in enumerate(k["phis"]):
        phi = _tf(label, model.d, "phis")
        for c in compare_bel_fd(model, phi, x, h, times, sim, k["delta"], stream=i, n_sigma=ns):
            out.add(f"BEL - FD {phi.label} t={c.t:g}", "BEL gradient formula",
                    abs(c.difference.value), ns * c.difference.std_error, c.passed,
                    c.difference.std_error, bel=c.bel.total.value, fd=c.fd.value)

    # pathwise tangent-flow bound on a fine grid
    esim = SimConfig(dt=float(k["eta_dt"]), t_final=float(k["eta_t"]), n_paths=int(k["eta_paths"]),
                     seed=cfg.seed, scheme=cfg.sim["scheme"], taming_n=cfg.sim["taming_n"])
    b = simulate_paths(model, x, h, esim, stream=len(k["phis"])).require_finite()
    rep = check_eta_bound(b, tol["tol_disc"])
    out.add("max exp(-beta)|eta|/|h|", "pathwise tangent-flow bound", rep.worst_ratio,
            1.0 + tol["tol_disc"], rep.passed)

    anchor = k["exact_anchor"]
    if anchor and model.oracle is not None and model.oracle.linear_matrix is not None:
        phi = _tf(anchor["phi"], model.d, "exact_anchor")
        if not phi.label.startswith("sin["):
            raise ConfigError("knobs.exact_anchor.phi must be a sin wave")
        kvec = np.array([float(v) for v in phi.label[4:-1].split(",")])
        t = float(anchor["t"])
        est = estimate_DPt_fd(model, phi, x, h, t, sim.with_(t_final=t), k["delta"],
                              stream=len(k["phis"]) + 1)
        exact = exact_wave_gradient(model, kvec, x, h, t)
        dlt = 1e-3 * (1 + np.linalg.norm(x)) if k["delta"] is None else float(k["delta"])
        out.add(f"FD <DP_t {phi.label}, h> t={t:g} vs exact", "BEL gradient formula",
                abs(est.value - exact), ns * est.std_error + dlt**2, est.within(exact, ns, dlt**2),
                est.std_error, estimate=est.value, target=exact)


def _geom_grid(t_min, t_max, n, dt):
    g = np.geomspace(t_min, t_max, int(n))
    return sorted(set(float(round(t / dt) * dt) for t in g))


@experiment("small_t_scan", "small-time gradient envelope",
            {"x": None, "h": None, "phi": "sin[1]", "t_min": 0.05, "t_max": 1.0, "n_t": 6,
             "refine": 2, "p": 2.0, "slope_t_min": 0.01, "slope_t_max": 0.1, "slope_n_t": 6,
             "slope_floor": -0.65},
            {"dt": 0.001, "n_paths": 20_000})
def run_small_t_scan(cfg, model, out: Outcome):
    """Envelope constant on a coarse and a refined grid, and the small-time slope.

    The slope is fitted on its own short window: over longer horizons the
    exponential weight of the Feynman-Kac semigroup steepens the decay and
    would mask the behaviour as t -> 0.
    """
    k, tol = cfg.knobs, cfg.tolerances
    x = _vec(k["x"], model.d, key="x")
    h = _vec(k["h"] if k["h"] is not None else 1.0, model.d, key="h")
    phi = _tf(k["phi"], model.d, "phi")
    dt = float(cfg.sim["dt"])
    p = float(k["p"])
    coarse = _geom_grid(k["t_min"], k["t_max"], k["n_t"], dt)
    fine = _geom_grid(k["t_min"], k["t_max"], (int(k["n_t"]) - 1) * int(k["refine"]) + 1, dt)
    sim = sim_config(cfg, fine[-1])
    reps = [scan_small_t_singularity(model, phi, x, h, g, sim, p, float(k["slope_floor"]))
            for g in (coarse, fine)]
    c0, c1 = reps[0].c_p, reps[1].c_p
    change = abs(c1 - c0) / c0 if c0 > 0 else math.inf
    anchor = "small-time gradient envelope"
    out.add("envelope constant change under refinement", anchor, change,
            tol["envelope_stability"], change <= tol["envelope_stability"],
            coarse=c0, fine=c1, n_coarse=len(coarse), n_fine=len(fine))
    out.add("envelope constant finite", anchor, c1, math.inf, bool(np.isfinite(c1)))

    sgrid = _geom_grid(k["slope_t_min"], k["slope_t_max"], k["slope_n_t"], dt)
    r = scan_small_t_singularity(model, phi, x, h, sgrid, sim.with_(t_final=sgrid[-1]), p,
                                 float(k["slope_floor"]), stream=1)
    slope = r.slope if r.conclusive else float("nan")
    out.add("log-log slope of |DS_t phi| as t -> 0", anchor, slope, r.slope_floor, r.slope_ok,
            conclusive=r.conclusive)


@experiment("invariant_sample", "invariant measure by long-run averaging",
            {**SAMPLING_KNOBS, "export": True}, SAMPLING_SIM)
def run_invariant_sample(cfg, model, out: Outcome):
    k, tol = cfg.knobs, cfg.tolerances
    meas = _sample(model, cfg, k)
    if k["export"]:
        out.exports["samples.csv"] = meas.to_csv
    est = meas.mean(lambda x: np.sum(x * x, axis=1))
    bound = (2 * model.params.a + model.d) / model.params.omega
    out.add("E|X|^2 <= A_1", "stationary moment bound", est.value, bound,
            est.value <= bound + tol["n_sigma"] * est.std_error, est.std_error)
    o = model.oracle
    if o is not None and o.stationary_cov is not None:
        exact = float(np.trace(o.stationary_cov))
        out.add("E|X|^2 vs exact", "invariant measure by long-run averaging",
                abs(est.value - exact), tol["n_sigma"] * est.std_error,
                est.within(exact, tol["n_sigma"]), est.std_error, estimate=est.value, target=exact)


def _default_F(d):
    return VectorField([tanh_ridge(np.eye(d)[i]) for i in range(d)])


@experiment("fomin_suite", "Fomin integration by parts with a score field",
            {**SAMPLING_KNOBS, "bandwidth_rule": "score_matching", "variance_correction": True,
             "phis": ["sin[1]", "cos[1]", "tanh[1]", "bump[0]"], "directions": None, "p": 2.0,
             "score_point": 0.5, "F": None, "psi": "cos[1]", "generator_point": 1.0,
             "lp_ladder": [1, 2, 4, 8], "export": True},
            SAMPLING_SIM)
def run_fomin_suite(cfg, model, out: Outcome):
    k, tol = cfg.knobs, cfg.tolerances
    ns = tol["n_sigma"]
    d = model.d
    meas = _sample(model, cfg, k)
    sf = fit_score(meas, k["bandwidth_rule"], variance_correction=bool(k["variance_correction"]))
    if k["export"]:
        out.exports["score.csv"] = sf.to_csv
    dirs = _directions(k["directions"], d)
    exact_v = oracle_score(model) if _has_density(model) else None
    anchor = "Fomin integration by parts"

    for label in k["phis"]:
        phi = _tf(label, d, "phis")
        for z in dirs:
            r = ibp_residual(meas, sf, phi, z, float(k["p"]))
            zs = ",".join(f"{c:g}" for c in z)
            out.add(f"IBP {phi.label} z=({zs}) normalised residual", anchor, r.normalized_residual,
                    tol["ibp"], r.normalized_residual <= tol["ibp"], r.difference.std_error,
                    lhs=r.lhs.value, rhs=r.rhs.value)
            if exact_v is not None and d == 1 and phi.label == "sin[1]" and np.allclose(z, 1.0):
                e = model.oracle.stationary_expectation(math.cos)
                out.add_target("IBP sin lhs vs exact", anchor, r.lhs, e, tol["ibp_abs"])
                out.add_target("IBP sin rhs vs exact", anchor, r.rhs, e, tol["ibp_abs"])

    V = sf.on(meas)
    for z in dirs:
        est = meas.expect(V @ z)
        zs = ",".join(f"{c:g}" for c in z)
        out.add(f"score centering z=({zs})", anchor, abs(est.value), ns * est.std_error,
                abs(est.value) <= ns * est.std_error, est.std_error)

    if exact_v is not None:
        err = score_relative_error(meas, sf, exact_v)
        out.add("score relative L2 error", "score field of the invariant density", err,
                tol["score_rel_l2"], err <= tol["score_rel_l2"])
        xp = _vec(k["score_point"], d, key="score_point")[None, :]
        vh, ve = float(sf.field(xp)[0] @ dirs[0]), float(exact_v(xp)[0] @ dirs[0])
        rel = abs(vh - ve) / abs(ve) if ve != 0 else abs(vh)
        out.add("score at point vs exact", "score field of the invariant density", rel,
                tol["score_point_rel"], rel <= tol["score_point_rel"], estimate=vh, target=ve)

    ladder = score_lp_norms(meas, sf, dirs[0], tuple(float(p) for p in k["lp_ladder"]))
    vals = [ladder[p].value for p in ladder]
    ok = bool(np.all(np.isfinite(vals)) and np.all(np.diff(vals) >= 0))
    out.add("score L^p ladder finite and increasing", "score integrability", vals[-1], math.inf, ok,
            ladder={f"{p:g}": v for p, v in zip(ladder, vals)})

    F = _default_F(d) if k["F"] is None else VectorField([_tf(l, d, "F") for l in k["F"]])
    phi0 = _tf(k["phis"][0], d, "phis")
    psi = _tf(k["psi"], d, "psi")
    res = adjointness_residual(meas, sf, phi0, F)
    out.add("adjointness residual", "adjoint of the gradient", abs(res.value), ns * res.std_error,
            abs(res.value) <= ns * res.std_error, res.std_error)
    res = dirichlet_residual(meas, sf, phi0, psi)
    out.add("Dirichlet form residual", "generalized Ornstein-Uhlenbeck generator", abs(res.value),
            ns * res.std_error, abs(res.value) <= ns * res.std_error, res.std_error)
    if exact_v is not None and phi0.hessian is not None:
        xg = _vec(k["generator_point"], d, key="generator_point")[None, :]
        got = float(generalized_ou_apply(sf, phi0, xg)[0])
        lap = float(np.trace(phi0.hessian(xg)[0]))
        want = 0.5 * lap - 0.5 * float(exact_v(xg)[0] @ phi0.grad(xg)[0])
        rel = abs(got - want) / abs(want) if want != 0 else abs(got)
        out.add("generator at point vs exact", "generalized Ornstein-Uhlenbeck generator", rel,
                tol["generator_rel"], rel <= tol["generator_rel"], estimate=got, target=want)


@experiment("cp_scan", "uniform gradient pairing inequality",
            {**SAMPLING_KNOBS, "battery": None, "directions": None, "p": 2.0,
             "bandwidth_rule": "score_matching", "variance_correction": True,
             "exact_entry": "sin[1]"},
            SAMPLING_SIM)
def run_cp_scan(cfg, model, out: Outcome):
    k, tol = cfg.knobs, cfg.tolerances
    d = model.d
    meas = _sample(model, cfg, k)
    battery = canonical_battery(d) if k["battery"] is None else [_tf(l, d, "battery") for l in k["battery"]]
    sf = fit_score(meas, k["bandwidth_rule"], variance_correction=bool(k["variance_correction"]))
    p = float(k["p"])
    rep = estimate_Cp(meas, sf, battery, _directions(k["directions"], d), p)
    anchor = "uniform gradient pairing inequality"
    out.add("C_p sup ratio finite", anchor, rep.sup, math.inf, bool(np.isfinite(rep.sup)),
            argmax=max(rep.entries, key=lambda e: e.ratio).label)
    out.add("C_p half vs full battery growth", anchor, rep.relative_growth, tol["cp_stability"],
            rep.stable(tol["cp_stability"]), half_sup=rep.half_sup, sup=rep.sup)
    lbl = k["exact_entry"]
    if lbl and _has_density(model) and d == 1:
        phi = _tf(lbl, d, "exact_entry")
        e = rep.entry(phi.label, [1.0])
        o = model.oracle
        num = o.stationary_expectation(lambda x: float(phi.grad(np.array([[x]]))[0, 0]))
        den = o.stationary_expectation(lambda x: abs(float(phi(np.array([[x]]))[0])) ** p) ** (1 / p)
        exact = abs(num) / den
        out.add_target(f"C_p entry {phi.label} h=1 vs exact", anchor,
                       MCEstimate(e.ratio, e.std_error, len(meas)), exact, tol["cp_entry_abs"])
