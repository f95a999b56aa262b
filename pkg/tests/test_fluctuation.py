import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slowfast_mdp.errors import ConfigError, DivergenceFault, NumericalFault, ShapeMismatchFault
from slowfast_mdp.fluctuation import (FluctuationField, HermiteDictionary, TestDictionary,
                                      TestFunction, dual_norm_surrogate, embedding_constant,
                                      fluctuation_pairings, gaussian, hermite_derivative_matrix,
                                      hermite_functions, linear_combination, sine, sobolev_norm,
                                      sup_seminorm, tanh_function, zero_function)
from slowfast_mdp.model import ou_linear
from slowfast_mdp.simulate import simulate_averaged

PHIS = [gaussian(), tanh_function(), sine()]


@pytest.fixture(scope="module")
def small_run():
    return simulate_averaged(ou_linear(), 64, 1.0, 1e-2, seed=21)


def test_self_pairing_is_zero(small_run):
    fl = fluctuation_pairings(small_run, small_run, 1.0, PHIS)
    assert np.all(fl.z == 0.0)


def test_pairing_vanishes_at_time_zero(small_run, ou_limit):
    _, lim = ou_limit
    fl = fluctuation_pairings(small_run, lim, 1.0, PHIS)
    assert np.max(np.abs(fl.z[:, 0])) < 1e-12  # both start at the deterministic initial point
    assert fl.scale == pytest.approx(8.0)
    assert fl.provenance["N"] == 64


def test_limit_must_be_larger(small_run):
    other = simulate_averaged(ou_linear(), 100, 1.0, 1e-2, seed=3)
    with pytest.raises(ConfigError):
        fluctuation_pairings(small_run, other, 1.0, PHIS)


def test_time_grid_mismatch(small_run):
    other = simulate_averaged(ou_linear(), 1000, 0.5, 1e-2, seed=3)
    with pytest.raises(ShapeMismatchFault):
        fluctuation_pairings(small_run, other, 1.0, PHIS)


def test_pairing_is_linear_in_test_function_and_a_N(small_run, ou_limit):
    _, lim = ou_limit
    f, g = gaussian(), tanh_function()
    combo = linear_combination(2.5, f, -0.75, g)
    z = fluctuation_pairings(small_run, lim, 1.0, [f, g, combo]).z
    np.testing.assert_allclose(z[2], 2.5 * z[0] - 0.75 * z[1], atol=1e-12)
    z2 = fluctuation_pairings(small_run, lim, 2.0, [f, g]).z
    np.testing.assert_allclose(z2, 2.0 * z[:2], rtol=1e-14, atol=1e-15)


def test_sobolev_norms_of_gaussian(frozen):
    ref = frozen["sobolev_gaussian"]
    g = gaussian()
    assert sobolev_norm(g, 0) == pytest.approx(ref["n0"], abs=1e-4)
    assert sobolev_norm(g, 0) == pytest.approx((math.pi / 2) ** 0.25, abs=1e-4)
    assert sobolev_norm(g, 1) == pytest.approx(ref["n1"], rel=1e-6)
    values = [sobolev_norm(g, n) for n in range(5)]
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert sobolev_norm(zero_function(), 3) == 0.0


def test_sobolev_norm_rejects_non_decaying_functions():
    with pytest.raises(DivergenceFault):
        sobolev_norm(tanh_function(), 0)
    with pytest.raises(DivergenceFault):
        sobolev_norm(sine(), 1)
    with pytest.raises(ConfigError):
        sobolev_norm(gaussian(), 99)


def test_sup_seminorms():
    assert sup_seminorm(sine(), 0) == pytest.approx(1.0, abs=1e-6)
    assert sup_seminorm(sine(), 2) == pytest.approx(3.0, abs=1e-6)
    assert sup_seminorm(tanh_function(), 0) == pytest.approx(1.0, abs=1e-12)
    # sup |d/dx exp(-x^2)| = sqrt(2/e) at x = 1/sqrt(2)
    assert sup_seminorm(gaussian(), 1) == pytest.approx(1 + math.sqrt(2 / math.e), abs=1e-8)


def test_embedding_constant_is_finite_for_schwartz_functions():
    for n in range(3):
        c = embedding_constant(gaussian(), n)
        assert 0 < c < 10
    assert embedding_constant(zero_function(), 1) == 0.0


def test_hermite_functions_are_orthonormal():
    x = np.linspace(-20, 20, 8001)
    psi = hermite_functions(x, 19)
    gram = np.trapezoid(psi[:, None, :] * psi[None, :, :], x, axis=2)
    np.testing.assert_allclose(gram, np.eye(20), atol=1e-10)


def test_second_derivative_matrix_matches_oracle(frozen):
    D = hermite_derivative_matrix(22)
    np.testing.assert_allclose((D @ D)[:20, :20], np.array(frozen["hermite_D2"]), atol=1e-12)


def test_hermite_dictionary_derivatives():
    dic = HermiteDictionary(8)
    x = np.linspace(-3, 3, 13)
    psi = hermite_functions(x, 20)
    for j in range(8):
        # psi_j'' = (x^2 - (2j + 1)) psi_j
        np.testing.assert_allclose(dic.values(x, 2)[j], (x * x - 2 * j - 1) * psi[j], atol=1e-12)
    assert max(dic.fd_error.values()) < 1e-5
    assert dic.derivative_coefficients(1).shape[0] == 8
    with pytest.raises(ConfigError):
        HermiteDictionary(0)


def test_dictionary_rejects_inconsistent_derivatives():
    bad = TestFunction("bad", lambda x, k: np.sin(x) if k == 0 else np.sin(x) * 1.01)
    with pytest.raises(NumericalFault, match="bad"):
        TestDictionary([gaussian(), bad])
    with pytest.raises(ConfigError):
        TestDictionary([])
    TestDictionary([gaussian(), tanh_function(), sine()])


def test_time_derivative_on_report_grid():
    t = np.linspace(0, 1, 101)
    fl = FluctuationField(t=t, z=np.vstack([t ** 2, np.sin(t)]), scale=1.0)
    d = fl.time_derivative()
    np.testing.assert_allclose(d[0], 2 * t, atol=1e-10)
    np.testing.assert_allclose(d[1], np.cos(t), atol=1e-4)


def test_time_derivative_with_fine_data():
    fine = np.linspace(0, 1, 1001)
    t = fine[::10]
    z = np.vstack([np.exp(fine)])
    fl = FluctuationField(t=t, z=np.exp(t)[None, :], scale=1.0, fine_t=fine, fine_z=z)
    np.testing.assert_allclose(fl.time_derivative()[0], np.exp(t), atol=1e-8)


def test_non_finite_field_rejected():
    with pytest.raises(NumericalFault):
        FluctuationField(t=np.arange(2.0), z=np.array([[0.0, np.nan]]), scale=1.0)


def test_dual_norm_surrogate(small_run, ou_limit):
    _, lim = ou_limit
    dic = HermiteDictionary(4)
    fl = fluctuation_pairings(small_run, lim, 1.0, dic)
    s = dual_norm_surrogate(fl, dic, 1)
    norms = np.array([sobolev_norm(m, 1) for m in dic.members])
    assert s.shape == fl.t.shape and s[0] < 1e-12
    np.testing.assert_allclose(s, np.max(np.abs(fl.z) / norms[:, None], axis=0))


def test_mdp_scaled_pairings_stay_bounded(ou_limit):
    # a_N = N^(-1/4) shrinks the CLT-size fluctuations
    _, lim = ou_limit
    worst = {}
    for N in (32, 128):
        a_N = N ** -0.25
        vals = []
        for seed in range(8):
            emp = simulate_averaged(ou_linear(), N, 1.0, 1e-2, seed=100 + seed)
            vals.append(np.max(np.abs(fluctuation_pairings(emp, lim, a_N, PHIS).z)))
        worst[N] = float(np.mean(vals))
    assert all(v < 3.0 for v in worst.values()), worst


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_linear_combination_derivatives(alpha, beta):
    f = linear_combination(alpha, gaussian(), beta, sine())
    x = np.linspace(-2, 2, 9)
    for k in range(3):
        np.testing.assert_allclose(f.deriv(x, k),
                                   alpha * gaussian().deriv(x, k) + beta * sine().deriv(x, k))
    assert f.decay == "bounded"
