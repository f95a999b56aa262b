import math

import numpy as np
import pytest

from conftest import custom_model
from slowfast_mdp.equilibrium import equilibrium_batch
from slowfast_mdp.errors import ConfigError
from slowfast_mdp.measures import MeasureHandle
from slowfast_mdp.model import (BUILTINS, Budget, build_model, no_multiscale, ou_linear,
                                two_scale_langevin, validate_assumptions)

PROBE_X = np.linspace(-3, 3, 7)[:, None]
PROBE_Y = np.linspace(-4, 4, 9)[None, :]
MU = MeasureHandle.empirical(np.array([-1.0, 0.0, 0.5, 2.0]))


def test_ou_linear_fast_diffusion_is_one():
    m = build_model({"example": "ou_linear"})
    # a = (0^2 + sqrt(2)^2) / 2
    np.testing.assert_allclose(m.a(PROBE_X, PROBE_Y, MU), np.ones((7, 9)), rtol=4e-16, atol=0)
    np.testing.assert_array_equal(m.b(0.0, PROBE_Y, MU), PROBE_Y)
    assert m.kappa == 1.0


def test_all_builtins_build():
    for name in BUILTINS:
        m = build_model({"example": name})
        assert m.name == name


def test_two_scale_coefficients_follow_potentials():
    m = two_scale_langevin()
    p = m.params
    x, y = PROBE_X, PROBE_Y
    # b = -V2'(y) with V2 = -cos y, f = -V4'(y) with V4 = kappa y^2/2 + ripple cos y
    np.testing.assert_allclose(m.b(x, y, MU), np.broadcast_to(-np.sin(y), (7, 9)))
    np.testing.assert_allclose(m.f(x, y, MU), np.broadcast_to(-y + 0.25 * np.sin(y), (7, 9)))
    conv1 = np.mean(p["W1p"](x - MU.nodes[None, :]), axis=1, keepdims=True)
    conv2 = np.mean(p["W2p"](x - MU.nodes[None, :]), axis=1, keepdims=True)
    np.testing.assert_allclose(m.c(x, y, MU), np.broadcast_to(-x - conv1, (7, 9)), atol=1e-15)
    np.testing.assert_allclose(m.g(x, y, MU),
                               np.broadcast_to(-0.5 * np.tanh(x) - conv2, (7, 9)), atol=1e-15)
    assert np.all(m.tau1(x, y, MU) == 0.5) and np.all(m.tau2(x, y, MU) == 1.0)


def test_no_multiscale_fast_coefficients_are_bitwise_zero():
    m = no_multiscale()
    for name in ("b", "f", "g", "tau1", "tau2"):
        vals = getattr(m, name)(PROBE_X, PROBE_Y, MU)
        assert vals.shape == (7, 9)
        assert np.all(vals == 0.0), name
    assert m.degenerate


def test_callbacks_are_deterministic():
    for name in BUILTINS:
        m = build_model({"example": name})
        for coeff in ("b", "c", "sigma", "f", "g", "tau1", "tau2"):
            fn = getattr(m, coeff)
            np.testing.assert_array_equal(fn(PROBE_X, PROBE_Y, MU), fn(PROBE_X, PROBE_Y, MU))


@pytest.mark.parametrize("cfg", [
    {"example": "nope"},
    {"example": "ou_linear", "kappa": 0.0},
    {"example": "ou_linear", "bogus": 1},
    {"coefficients": {"b": "y"}, "kappa": 1.0},
    {"coefficients": {n: 0 for n in ("b", "c", "sigma", "f", "g", "tau1", "tau2")}, "kappa": -1},
    {"coefficients": {n: "os.system" for n in ("b", "c", "sigma", "f", "g", "tau1", "tau2")},
     "kappa": 1},
    "ou_linear",
])
def test_bad_configs_rejected(cfg):
    with pytest.raises(ConfigError):
        build_model(cfg)


def test_expression_model_matches_builtin():
    m, ref = custom_model(), ou_linear()
    for coeff in ("b", "c", "sigma", "f", "g", "tau1", "tau2"):
        np.testing.assert_allclose(getattr(m, coeff)(PROBE_X, PROBE_Y, MU),
                                   getattr(ref, coeff)(PROBE_X, PROBE_Y, MU), atol=1e-15)
    np.testing.assert_allclose(m.eta_fn(PROBE_X, PROBE_Y, MU), 0.0, atol=1e-15)


def test_expression_model_sees_measure_moments():
    m = custom_model(coefficients={"c": "m1 - x + 0*m2"})
    np.testing.assert_allclose(m.c(1.0, 0.0, MU), MU.nodes.mean() - 1.0)


def test_ou_linear_assumptions_pass_with_beta_1_9():
    # 2(f1 - f2)(y1 - y2) = -2 |dy|^2 <= -1.9 |dy|^2 exactly
    report = validate_assumptions(ou_linear(), Budget(n_probes=4096, beta=1.9))
    assert report.passed, report.checks
    assert report["A2"].margin == pytest.approx(0.1, abs=1e-9)


def test_zero_diffusion_fails_ellipticity_with_witness():
    m = custom_model(coefficients={"tau2": 0})
    budget = Budget(n_probes=1024, lambda_minus=1e-3)
    report = validate_assumptions(m, budget)
    a1 = report["A1"]
    assert not a1.passed
    assert a1.margin == pytest.approx(-budget.lambda_minus)
    assert a1.witness is not None and a1.margin < 0
    assert not report.passed


def test_two_scale_centering_passes():
    report = validate_assumptions(two_scale_langevin(), Budget(n_probes=2048))
    assert report["A3"].passed
    assert report.passed


def test_uncentred_b_fails_centering():
    report = validate_assumptions(custom_model(coefficients={"b": "y + 0.5"}),
                                  Budget(n_probes=1024, n_centering=16))
    assert not report["A3"].passed
    assert report["A3"].margin < 0 and report["A3"].witness is not None


def test_two_scale_b_integrates_to_zero_against_pi():
    m = two_scale_langevin()
    rng = np.random.default_rng(3)
    for _ in range(4):
        mu = MeasureHandle.empirical(rng.normal(size=12))
        xs = rng.uniform(-4, 4, 5)
        eq = equilibrium_batch(m, xs, mu)
        bv = m.b(xs[:, None], eq.y[None, :], mu)
        assert np.max(np.abs(eq.integrate(bv))) < 1e-8


def test_budget_validation():
    with pytest.raises(ConfigError):
        Budget(n_probes=0)
    with pytest.raises(ConfigError):
        Budget(box=math.inf)


def test_with_init_copies():
    m = ou_linear().with_init(1.0, -2.0)
    assert m.init == (1.0, -2.0)
    assert ou_linear().init == (0.0, 0.0)
