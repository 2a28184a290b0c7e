import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fominlab.drift_models import (DriftModel, HypothesisParams, available_models, check_hypothesis,
                                   default_grid, eval_drift, eval_jacobian, get_model,
                                   potential_grad, potential_V, tame_drift, with_params)
from fominlab.errors import ModelEvaluationError

BUILTINS = ["ou", "rotated", "double_well"]
coord = st.floats(-8, 8, allow_nan=False)


def test_params_validation():
    with pytest.raises(ValueError):
        HypothesisParams(omega=0.0, a=0.0, K=1.0, N=1, d=1)
    with pytest.raises(ValueError):
        HypothesisParams(omega=1.0, a=-1.0, K=1.0, N=1, d=1)
    with pytest.raises(ValueError):
        HypothesisParams(omega=1.0, a=0.0, K=1.0, N=0, d=1)


def test_builtins_registered():
    assert set(BUILTINS) <= set(available_models())
    with pytest.raises(KeyError):
        get_model("no_such_model")


def test_drift_examples():
    assert np.allclose(eval_drift(get_model("ou"), [1.5]), [-1.5])
    assert np.allclose(eval_drift(get_model("double_well"), [2.0]), [-6.0])
    assert np.allclose(eval_drift(get_model("rotated"), [1.0, 0.0]), [-1.0, 1.0])


def test_jacobian_examples():
    assert np.allclose(eval_jacobian(get_model("ou"), [0.3]), [[-1.0]])
    assert np.allclose(eval_jacobian(get_model("double_well"), [1.0]), [[-2.0]])
    assert np.allclose(eval_jacobian(get_model("rotated"), [0.7, -2.0]), [[-1, -1], [1, -1]])


def test_nonfinite_output_raises():
    p = HypothesisParams(omega=1.0, a=0.0, K=1.0, N=1, d=1)
    bad = DriftModel("bad", p, lambda x: x / 0.0 * 0.0, lambda x: np.zeros(x.shape + (1,)))
    with np.errstate(all="ignore"), pytest.raises(ModelEvaluationError):
        eval_drift(bad, [1.0])


def test_nonfinite_input_raises():
    with pytest.raises(ValueError):
        eval_drift(get_model("ou"), [np.nan])


@pytest.mark.parametrize("name", BUILTINS)
def test_shipped_certificates_pass(name):
    rep = check_hypothesis(get_model(name))
    assert rep.passed, rep


def test_ou_dissipativity_slack_is_exactly_zero():
    rep = check_hypothesis(get_model("ou"), np.linspace(-10, 10, 2001))
    assert rep.passed
    assert rep.dissipativity_slack == pytest.approx(0.0, abs=1e-12)


def test_double_well_slack_attained_at_unit_radius():
    grid = np.linspace(-5, 5, 100_001)
    rep = check_hypothesis(get_model("double_well"), grid)
    assert rep.dissipativity_slack == pytest.approx(0.0, abs=1e-9)
    assert abs(rep.dissipativity_argmin[0]) == pytest.approx(1.0, abs=1e-3)


def test_wrong_growth_constant_fails():
    m = with_params(get_model("ou"), K=1.0)
    rep = check_hypothesis(m, [[0.5]])
    assert not rep.growth_ok
    assert rep.growth_slack == pytest.approx(1.25 - 1.5)


def test_cubic_drift_needs_quartic_growth_exponent():
    # |x - x^3| + |1 - 3x^2| grows like 4|x|^3, beyond any K(1 + x^2)
    m = with_params(get_model("double_well"), N=1)
    assert not check_hypothesis(m).growth_ok


def test_default_grid_shape():
    assert default_grid(1).shape == (10_000, 1)
    g = default_grid(2)
    assert g.shape[1] == 2 and np.max(np.linalg.norm(g, axis=1)) == pytest.approx(10.0)


def test_potential_examples():
    ou = get_model("ou")
    assert potential_V(ou, [0.0]) == pytest.approx(2.0)
    assert potential_V(ou, [3.0]) == pytest.approx(20.0)
    dw = get_model("double_well")
    assert potential_V(dw, [0.0]) == pytest.approx(dw.params.K)


@given(st.lists(coord, min_size=2, max_size=2))
def test_potential_grad_matches_finite_differences(x):
    m = get_model("rotated")
    x = np.array(x)
    g = potential_grad(m, x).ravel()
    fd = [(potential_V(m, x + e) - potential_V(m, x - e)).item() / 2e-6 for e in np.eye(2) * 1e-6]
    assert np.allclose(g, fd, rtol=1e-5, atol=1e-4)


def test_taming_examples():
    dw1 = with_params(get_model("double_well"), N=1)
    assert eval_drift(tame_drift(dw1, 1), [2.0])[0] == pytest.approx(-4 / 17 - 2)
    ou = get_model("ou")
    xs = np.linspace(-5, 5, 11)[:, None]
    assert np.allclose(eval_drift(tame_drift(ou, 3), xs), eval_drift(ou, xs))
    for name in BUILTINS:
        m = get_model(name)
        z = np.zeros(m.d)
        assert np.allclose(eval_drift(tame_drift(m, 2), z), eval_drift(m, z))


@settings(max_examples=60)
@given(x=coord, n=st.integers(1, 10_000))
def test_taming_preserves_dissipativity(x, n):
    m = get_model("double_well")
    p = m.params
    f = eval_drift(tame_drift(m, n), [x])[0]
    assert f * x + p.omega * x * x - p.a <= 1e-9


@given(st.lists(coord, min_size=2, max_size=2))
def test_taming_preserves_dissipativity_2d(x):
    m = get_model("rotated")
    x = np.array(x)
    f = eval_drift(tame_drift(m, 5), x).ravel()
    assert f @ x + x @ x <= 1e-9


@given(coord)
def test_taming_converges_monotonically(x):
    m = get_model("double_well")
    b = eval_drift(m, [x])[0]
    errs = [abs(eval_drift(tame_drift(m, n), [x])[0] - b) for n in (1, 10, 100, 1000, 10_000)]
    assert all(e2 <= e1 + 1e-12 for e1, e2 in zip(errs, errs[1:]))


@pytest.mark.parametrize("name", BUILTINS)
@pytest.mark.parametrize("tamed", [False, True])
def test_jacobian_matches_finite_differences(name, tamed):
    m = get_model(name)
    if tamed:
        m = tame_drift(m, 7)
    rng = np.random.default_rng(1)
    xs = rng.uniform(-3, 3, (50, m.d))
    J = eval_jacobian(m, xs)
    dl = 1e-4
    for i in range(m.d):
        e = np.zeros(m.d)
        e[i] = dl
        fd = (eval_drift(m, xs + e) - eval_drift(m, xs - e)) / (2 * dl)
        assert np.allclose(J[:, :, i], fd, rtol=1e-6, atol=1e-6)


def test_oracle_stationary_moments():
    ou = get_model("ou")
    assert ou.oracle.stationary_expectation(lambda x: x * x) == pytest.approx(0.5, rel=1e-8)
    rot = get_model("rotated")
    assert np.allclose(rot.oracle.stationary_cov, np.eye(2) / 2)


def test_oracle_transition_moments_ou():
    mean, cov = get_model("ou").oracle.transition_moments([1.0], 1.0)
    assert mean[0] == pytest.approx(np.exp(-1.0))
    assert cov[0, 0] == pytest.approx((1 - np.exp(-2.0)) / 2)
