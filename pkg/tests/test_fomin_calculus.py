import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from fominlab.drift_models import get_model
from fominlab.errors import DegenerateSampleError
from fominlab.fomin_calculus import (ScoreField, adjointness_residual, dirichlet_residual, dstar,
                                     estimate_Cp, fit_score, generalized_ou_apply, ibp_residual,
                                     kde_fit, lp_norm, oracle_score, score_lp_norms,
                                     score_matching_loss, score_relative_error, select_bandwidth,
                                     silverman_bandwidth)
from fominlab.invariant_measure import EmpiricalMeasure
from fominlab.observables import (VectorField, canonical_battery, constant, cos_wave, gaussian_bump,
                                  sin_wave, tanh_ridge)

SIN = sin_wave([1.0])
OU_VAR = 0.5


def gauss_expect(f, var=OU_VAR):
    dens = lambda x: math.exp(-x * x / (2 * var)) / math.sqrt(2 * math.pi * var)
    return integrate.quad(lambda x: f(x) * dens(x), -np.inf, np.inf)[0]


def normal_measure(n, d=1, seed=0, scale=math.sqrt(OU_VAR)):
    return EmpiricalMeasure.uniform(np.random.default_rng(seed).normal(0, scale, (n, d)))


# --- density -------------------------------------------------------------


def test_density_at_origin(ou_stationary):
    _, meas = ou_stationary
    rho = kde_fit(meas).density([0.0])[0]
    assert rho == pytest.approx(1 / math.sqrt(math.pi), rel=0.05)
    assert 1 / math.sqrt(math.pi) == pytest.approx(0.564190, abs=1e-6)


def test_density_integrates_to_one():
    dens = kde_fit(normal_measure(2000))
    xs = np.linspace(-6, 6, 4001)
    assert np.trapezoid(dens.density(xs[:, None]), xs) == pytest.approx(1.0, abs=1e-6)


def test_single_atom_raises():
    with pytest.raises(DegenerateSampleError):
        kde_fit(EmpiricalMeasure.uniform(np.array([[0.3]])))


def test_constant_sample_raises():
    with pytest.raises(DegenerateSampleError):
        silverman_bandwidth(EmpiricalMeasure.uniform(np.ones((500, 1))))


def test_too_few_samples_rejected():
    with pytest.raises(ValueError):
        kde_fit(normal_measure(50))


@settings(max_examples=20, deadline=None)
@given(shift=st.floats(-50, 50, allow_nan=False), x=st.floats(-2, 2, allow_nan=False))
def test_translation_equivariance(shift, x):
    meas = normal_measure(300, seed=1)
    moved = EmpiricalMeasure.uniform(meas.samples + shift)
    a = kde_fit(meas, method="exact")
    b = kde_fit(moved, method="exact")
    assert b.log_density([x + shift])[0] == pytest.approx(a.log_density([x])[0], abs=1e-8)
    assert b.grad_log([x + shift])[0, 0] == pytest.approx(a.grad_log([x])[0, 0], abs=1e-7)


@pytest.mark.parametrize("d", [1, 2])
def test_binned_matches_exact(d):
    meas = normal_measure(3000, d=d, seed=2)
    ex = kde_fit(meas, method="exact")
    bn = kde_fit(meas, method="binned")
    x = np.random.default_rng(3).normal(0, 0.7, (200, d))
    # binning error grows in the tails, where the log density is steep
    assert np.allclose(bn.log_density(x), ex.log_density(x), atol=3e-2)
    core = np.linalg.norm(x, axis=1) < 1.0
    assert np.allclose(bn.log_density(x[core]), ex.log_density(x[core]), atol=5e-3)
    assert np.allclose(bn.grad_log(x[core]), ex.grad_log(x[core]), atol=3e-2)


def test_binned_far_point_falls_back_to_exact():
    meas = normal_measure(5000, seed=4)
    bn = kde_fit(meas, method="binned")
    ex = kde_fit(meas, method="exact")
    far = np.array([[8.0]])
    assert np.isfinite(bn.log_density(far)).all()
    assert bn.grad_log(far)[0, 0] == pytest.approx(ex.grad_log(far)[0, 0], rel=1e-2)


def test_laplacian_matches_finite_differences():
    dens = kde_fit(normal_measure(400, d=2, seed=5), method="exact")
    x = np.array([[0.3, -0.2]])
    _, lap = dens.grad_and_laplacian_log(x)
    e = 1e-4
    fd = sum((dens.log_density(x + s) - 2 * dens.log_density(x) + dens.log_density(x - s)) / e**2
             for s in np.eye(2) * e)
    assert lap[0] == pytest.approx(fd[0], rel=1e-4)


def test_score_matching_prefers_the_truth():
    meas = normal_measure(4000, seed=6)
    test = normal_measure(4000, seed=7)
    h, factors, losses = select_bandwidth(meas)
    assert len(losses) == len(factors) and np.all(np.isfinite(losses))
    # the exact Gaussian (as a zero-width mixture limit) has loss -1/(2 var)
    best = score_matching_loss(kde_fit(meas, h), test)
    assert best == pytest.approx(-1.0, abs=0.1)


def test_variance_correction_keeps_sample_variance():
    meas = normal_measure(2000, seed=8)
    dens = kde_fit(meas, 0.3, method="exact", variance_correction=True)
    xs = np.linspace(-6, 6, 6001)
    p = dens.density(xs[:, None])
    var = np.trapezoid(xs**2 * p, xs) - np.trapezoid(xs * p, xs) ** 2
    assert var == pytest.approx(np.var(meas.samples), rel=1e-3)


# --- score ---------------------------------------------------------------


@pytest.mark.parametrize("name,z", [("ou", [1.0]), ("rotated", [1.0, 0.0])])
def test_score_at_point(name, z, request):
    sf = request.getfixturevalue(f"{name}_score")
    x = np.zeros(len(z))
    x[0] = 0.5
    assert sf(x, z)[0] == pytest.approx(1.0, rel=0.07)


@pytest.mark.parametrize("name", ["ou", "rotated"])
def test_score_l2_error(name, request):
    m, meas = request.getfixturevalue(f"{name}_stationary")
    sf = request.getfixturevalue(f"{name}_score")
    assert score_relative_error(meas, sf, oracle_score(m)) < 0.07


def test_oracle_score_sign():
    assert oracle_score(get_model("ou"))(np.array([[0.5]]))[0, 0] == pytest.approx(1.0)


def test_score_zero_direction(ou_score):
    assert np.all(ou_score(np.linspace(-2, 2, 9)[:, None], [0.0]) == 0.0)


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-5, 5, allow_nan=False), b=st.floats(-5, 5, allow_nan=False),
       x=st.lists(st.floats(-2, 2, allow_nan=False), min_size=2, max_size=2))
def test_score_linear_in_direction(rotated_score, a, b, x):
    z1, z2 = np.array([1.0, 0.3]), np.array([-0.4, 1.0])
    lhs = rotated_score(x, a * z1 + b * z2)
    rhs = a * rotated_score(x, z1) + b * rotated_score(x, z2)
    assert lhs == pytest.approx(rhs, abs=1e-9)


@pytest.mark.parametrize("name", ["ou", "rotated", "double_well"])
def test_score_is_centred(name, request):
    _, meas = request.getfixturevalue(f"{name}_stationary")
    sf = request.getfixturevalue(f"{name}_score")
    for i in range(meas.d):
        z = np.eye(meas.d)[i]
        est = meas.expect(sf.on(meas) @ z)
        assert abs(est.value) < 4 * est.std_error + 0.02


def test_score_csv(tmp_path, ou_score):
    path = tmp_path / "score.csv"
    ou_score.to_csv(path)
    with open(path) as fh:
        assert fh.readline().strip() == "x_1,v_e1"
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    assert data.shape == (len(ou_score.density.source), 2)
    assert np.array_equal(data[:, 1], ou_score.at_samples[:, 0])


def test_lp_ladder_monotone(ou_stationary, ou_score):
    _, meas = ou_stationary
    norms = score_lp_norms(meas, ou_score, [1.0])
    vals = [norms[p].value for p in sorted(norms)]
    assert all(a <= b + 1e-12 for a, b in zip(vals, vals[1:]))
    # |2X| with X ~ N(0, 1/2) has L^2 norm sqrt(2)
    assert norms[2].within(math.sqrt(2), 4, 0.07 * math.sqrt(2))


# --- integration by parts and C_p ----------------------------------------


def test_ibp_sin_both_sides(ou_stationary, ou_score):
    _, meas = ou_stationary
    rep = ibp_residual(meas, ou_score, SIN, [1.0])
    target = math.exp(-0.25)
    assert target == pytest.approx(0.778801, abs=1e-6)
    assert rep.lhs.within(target, 4, 0.005)
    assert rep.rhs.value == pytest.approx(target, rel=0.05)


def test_ibp_constant_phi(ou_stationary, ou_score):
    _, meas = ou_stationary
    rep = ibp_residual(meas, ou_score, constant(1.0, 1), [1.0])
    assert rep.lhs.value == 0.0
    assert abs(rep.rhs.value) < 0.02


@pytest.mark.parametrize("name", ["ou", "rotated", "double_well"])
def test_ibp_residual_small_on_battery(name, request):
    _, meas = request.getfixturevalue(f"{name}_stationary")
    sf = request.getfixturevalue(f"{name}_score")
    worst = max(ibp_residual(meas, sf, tf, z).normalized_residual
                for tf in canonical_battery(meas.d) for z in np.eye(meas.d))
    assert worst < 0.05


def test_lp_norm_examples(ou_stationary):
    _, meas = ou_stationary
    assert lp_norm(meas, constant(2.0, 1), 3).value == pytest.approx(2.0)
    target = math.sqrt((1 - math.exp(-1)) / 2)
    assert target == pytest.approx(0.562192, abs=1e-6)
    assert lp_norm(meas, SIN, 2).within(target, 4, 0.005)
    l1 = gauss_expect(lambda x: abs(math.sin(x)))
    assert lp_norm(meas, SIN, 1).within(l1, 4, 0.005)
    with pytest.raises(ValueError):
        lp_norm(meas, SIN, 0.5)


def test_cp_sin_entry(ou_stationary):
    _, meas = ou_stationary
    rep = estimate_Cp(meas, None, [SIN], [[1.0]])
    target = math.exp(-0.25) / math.sqrt((1 - math.exp(-1)) / 2)
    assert target == pytest.approx(1.385294, abs=2e-6)
    assert rep.entry("sin[1]").ratio == pytest.approx(target, abs=0.05)


def test_cp_constant_battery_rejected(ou_stationary):
    _, meas = ou_stationary
    rep = estimate_Cp(meas, None, [constant(1.0, 1)], [[1.0]])
    assert rep.sup == 0.0
    with pytest.raises(ValueError):
        estimate_Cp(meas, None, [constant(0.0, 1)], [[1.0]])


@settings(max_examples=15, deadline=None)
@given(alpha=st.floats(0.01, 100), s=st.floats(0.01, 100))
def test_cp_invariant_under_scaling(alpha, s):
    meas = normal_measure(2000, seed=9)
    base = estimate_Cp(meas, None, [SIN], [[1.0]]).sup
    scaled = estimate_Cp(meas, None, [SIN.scaled(alpha)], [[s]]).sup
    assert scaled == pytest.approx(base, rel=1e-9)


@pytest.mark.parametrize("name", ["ou", "rotated"])
def test_cp_stable_across_battery(name, request):
    _, meas = request.getfixturevalue(f"{name}_stationary")
    sf = request.getfixturevalue(f"{name}_score")
    rep = estimate_Cp(meas, sf, canonical_battery(meas.d), list(np.eye(meas.d)))
    assert math.isfinite(rep.sup) and rep.stable(0.25)
    # the dual form agrees entry by entry
    for e in rep.entries:
        assert abs(e.ratio - e.dual_ratio) < 0.05


# --- adjoint and generator ------------------------------------------------


def test_dstar_at_origin(ou_score):
    F = VectorField([SIN])
    assert dstar(None, ou_score, F, [0.0])[0] == pytest.approx(-1.0, abs=0.02)


def test_dstar_zero_field(ou_stationary, ou_score):
    _, meas = ou_stationary
    F = VectorField([constant(0.0, 1)])
    assert np.all(dstar(meas, ou_score, F, None) == 0.0)


@pytest.mark.parametrize("name", ["ou", "rotated", "double_well"])
def test_adjointness(name, request):
    _, meas = request.getfixturevalue(f"{name}_stationary")
    sf = request.getfixturevalue(f"{name}_score")
    d = meas.d
    F = VectorField([tanh_ridge(np.eye(d)[i]) for i in range(d)])
    for phi in (sin_wave(np.eye(d)[0]), gaussian_bump(np.zeros(d))):
        est = adjointness_residual(meas, sf, phi, F)
        assert abs(est.value) < 4 * est.std_error + 0.03


def test_generator_at_point(ou_score):
    exact = -0.5 * math.sin(1.0) - math.cos(1.0)
    assert exact == pytest.approx(-0.961037, abs=1e-6)
    assert generalized_ou_apply(ou_score, SIN, [1.0])[0] == pytest.approx(exact, rel=0.1)


def test_generator_constant_is_zero(ou_score):
    assert np.all(generalized_ou_apply(ou_score, constant(3.0, 1), np.linspace(-2, 2, 5)) == 0.0)


@pytest.mark.parametrize("name", ["ou", "double_well"])
def test_generator_has_zero_mean(name, request):
    _, meas = request.getfixturevalue(f"{name}_stationary")
    sf = request.getfixturevalue(f"{name}_score")
    for phi in (SIN, cos_wave([1.0]), gaussian_bump([0.0])):
        est = meas.expect(generalized_ou_apply(sf, phi, meas.samples))
        assert abs(est.value) < 4 * est.std_error + 0.02


def test_dirichlet_identity(rotated_stationary, rotated_score):
    _, meas = rotated_stationary
    phi, psi = sin_wave([1.0, 0.0]), gaussian_bump([0.0, 0.0])
    est = dirichlet_residual(meas, rotated_score, phi, psi)
    assert abs(est.value) < 4 * est.std_error + 0.02


def test_generator_needs_hessian(ou_score):
    from fominlab.observables import TestFunction
    bare = TestFunction("bare", SIN.phi, SIN.grad, 1.0)
    with pytest.raises(ValueError):
        generalized_ou_apply(ou_score, bare, [0.0])


def test_fit_score_default_rule():
    sf = fit_score(normal_measure(1000, seed=10))
    assert isinstance(sf, ScoreField)
    assert sf([0.0], [1.0])[0] == pytest.approx(0.0, abs=0.2)
