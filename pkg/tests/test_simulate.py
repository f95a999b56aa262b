import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import custom_model
from slowfast_mdp.errors import ConfigError, ShapeMismatchFault, StiffnessFault
from slowfast_mdp.measures import MeasureHandle
from slowfast_mdp.model import mean_field_ou, no_multiscale, ou_linear, two_scale_langevin
from slowfast_mdp.simulate import (ControlField, NoiseStreams, StepPolicy, coupling_error,
                                   occupation_cost, simulate_averaged, simulate_iid_mv,
                                   simulate_multiscale, w2_empirical)

FAST = StepPolicy(K=20, report_dt=0.02)


def test_step_policy_resolves_eps_squared():
    p = StepPolicy(K=20, report_dt=0.01)
    for eps in (0.4, 0.2, 0.1, 0.05):
        n = p.substeps(eps)
        assert p.report_dt / n <= eps ** 2 / 20 + 1e-15
        assert p.report_dt / (n - 1 if n > 1 else 1) >= eps ** 2 / 20 - 1e-15 or n == 1
    with pytest.raises(ConfigError):
        p.n_macro(0.015)
    with pytest.raises(ConfigError):
        StepPolicy(K=0)


def test_zero_control_equals_no_control():
    model = two_scale_langevin()
    a = simulate_multiscale(model, 16, 0.3, 0.2, FAST, seed=3)
    b = simulate_multiscale(model, 16, 0.3, 0.2, FAST, seed=3, control=ControlField.zero())
    assert np.array_equal(a.X, b.X) and np.array_equal(a.Y, b.Y)
    assert np.all(b.U == 0.0)


def test_paths_are_deterministic_and_well_formed():
    model = mean_field_ou()
    a = simulate_multiscale(model, 8, 0.25, 0.1, FAST, seed=9)
    b = simulate_multiscale(model, 8, 0.25, 0.1, FAST, seed=9)
    c = simulate_multiscale(model, 8, 0.25, 0.1, FAST, seed=10)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.Y, b.Y)
    assert not np.array_equal(a.X, c.X)
    assert a.t[0] == 0.0 and a.t[-1] == 0.1 and np.all(np.diff(a.t) > 0)
    assert np.all(a.X[:, 0] == model.init[0])


def test_fast_second_moment_bounded():
    model = ou_linear()
    worst = 0.0
    for seed in range(10):
        run = simulate_multiscale(model, 64, 0.1, 1.0, StepPolicy(), seed)
        worst = max(worst, float(np.max(np.mean(run.Y ** 2, axis=0))))
    assert worst < 3.0  # 3 a / kappa


def test_no_multiscale_fast_state_is_frozen():
    model = no_multiscale(init=(0.5, 0.25))
    run = simulate_multiscale(model, 8, 0.2, 0.1, FAST, seed=1)
    assert np.all(run.Y == 0.25)


def test_iid_shares_noise_with_multiscale():
    # without measure dependence the interaction is inert and the systems coincide
    model = two_scale_langevin(theta1=0.0, theta2=0.0)
    ms = simulate_multiscale(model, 12, 0.3, 0.2, FAST, seed=4)
    iid = simulate_iid_mv(model, 12, 48, 0.3, 0.2, FAST, seed=4)
    assert np.array_equal(ms.X, iid.X) and np.array_equal(ms.Y, iid.Y)
    assert not iid.flags["law_is_interacting_system"]


def test_noise_streams_are_keyed_per_particle():
    a = NoiseStreams(5, 4).draw("W", 10)
    b = NoiseStreams(5, 8).draw("W", 10)
    np.testing.assert_array_equal(a, b[:, :4])
    assert not np.array_equal(NoiseStreams(5, 4).draw("B", 10), a)


@pytest.mark.parametrize("eps", [0.4, 0.2, 0.1])
def test_measure_free_iid_gap_within_coupling_bound(eps):
    model = ou_linear()
    N = 32
    ms = simulate_multiscale(model, N, eps, 0.2, FAST, seed=2)
    iid = simulate_iid_mv(model, N, None, eps, 0.2, FAST, seed=2)
    assert coupling_error(ms, iid) <= eps ** 2 + 1.0 / N


def test_degenerate_auxiliary_ensemble_is_flagged():
    iid = simulate_iid_mv(ou_linear(), 8, 8, 0.3, 0.04, FAST, seed=0)
    assert iid.flags["law_is_interacting_system"]
    with pytest.raises(ConfigError):
        simulate_iid_mv(ou_linear(), 8, 4, 0.3, 0.04, FAST, seed=0)


def test_averaged_ou_variance():
    T = 1.0
    run = simulate_averaged(ou_linear(), 10_000, T, 1e-2, seed=12)
    x = run.X[:, -1]
    var = float(np.var(x, ddof=1))
    se = 3.0 * T * math.sqrt(2.0 / (x.size - 1))  # standard error of a Gaussian variance
    assert abs(var - 3.0 * T) < 3 * se


def test_averaged_no_multiscale_is_plain_mckean_vlasov():
    model = no_multiscale()
    M, T, dt = 200, 0.2, 0.01
    run = simulate_averaged(model, M, T, dt, seed=6)
    # independent Euler-Maruyama of dX = c(X, mu) dt + sigma dW on the same W stream
    W = NoiseStreams(6, M, kinds=("W",)).draw("W", round(T / dt))
    X = np.zeros(M)
    for k in range(W.shape[0]):
        mu = MeasureHandle.empirical(X)
        X = X + model.c(X, 0.0, mu) * dt + math.sqrt(dt) * W[k]
    np.testing.assert_allclose(run.X[:, -1], X, atol=1e-6)


def test_averaged_constant_paths_without_drift_or_diffusion():
    model = custom_model(coefficients={"b": 0, "sigma": 0}, init=[0.7, 0.0])
    run = simulate_averaged(model, 50, 0.1, 0.01, seed=0)
    assert np.all(run.X == 0.7)


def test_coupling_error_basics():
    run = simulate_averaged(ou_linear(), 10, 0.1, 0.01, seed=0)
    assert coupling_error(run, run) == 0.0
    other = simulate_averaged(ou_linear(), 12, 0.1, 0.01, seed=0)
    with pytest.raises(ShapeMismatchFault):
        coupling_error(run, other)


def test_w2_examples(frozen):
    for case in frozen["w2"]:
        assert w2_empirical(case["a"], case["b"]) == pytest.approx(case["w2"], abs=1e-12)
    assert w2_empirical([1.0, 5.0, -2.0], [5.0, -2.0, 1.0]) == 0.0
    with pytest.raises(ShapeMismatchFault):
        w2_empirical([0.0], [0.0, 1.0])
    mu = MeasureHandle.empirical(np.array([0.0, 2.0]))
    assert w2_empirical(mu, MeasureHandle.empirical(np.array([1.0, 3.0]))) == 1.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=20), st.floats(-10, 10))
def test_w2_shift_and_symmetry(atoms, shift):
    a = np.array(atoms)
    rng = np.random.default_rng(len(atoms))
    b = rng.permutation(a) + shift
    assert w2_empirical(a, b) == pytest.approx(abs(shift), abs=1e-9)
    c = rng.normal(size=a.size)
    assert w2_empirical(a, c) == pytest.approx(w2_empirical(c, a), abs=1e-12)


def test_occupation_cost():
    model = ou_linear()
    zero = simulate_multiscale(model, 8, 0.3, 1.0, FAST, seed=0, control=ControlField.zero())
    assert occupation_cost(zero) == 0.0
    const = simulate_multiscale(model, 8, 0.3, 1.0, FAST, seed=0,
                                control=ControlField.constant(1.0, 0.0))
    assert abs(occupation_cost(const) - 0.5) <= FAST.report_dt
    lin = ControlField(fn=lambda t, x, y: (x, 0.0 * x), name="x")
    run = simulate_multiscale(model, 8, 0.3, 1.0, FAST, seed=0, control=lin)
    sq = np.mean(run.U[:, :, 0] ** 2, axis=0)
    trap = 0.5 * float(np.trapezoid(sq, run.t))
    scale = float(np.max(sq))
    assert abs(occupation_cost(run) - trap) <= 2 * FAST.report_dt * scale
    with pytest.raises(ConfigError):
        occupation_cost(simulate_multiscale(model, 4, 0.3, 0.04, FAST, seed=0))


def test_blow_up_raises_stiffness_fault():
    model = custom_model(coefficients={"f": "y"})
    with pytest.raises(StiffnessFault, match="macro step"):
        simulate_multiscale(model, 4, 0.1, 1.0, StepPolicy(), seed=0)


def test_invalid_arguments():
    with pytest.raises(ConfigError):
        simulate_multiscale(ou_linear(), 4, 0.1, 0.1, FAST, a_N=0.0)
    with pytest.raises(ConfigError):
        simulate_multiscale(ou_linear(), 1, 0.1, 0.1, FAST)
    with pytest.raises(ConfigError):
        simulate_multiscale(ou_linear(), 4, 1.5, 0.1, FAST)


def test_empirical_measure_is_permutation_invariant():
    run = simulate_multiscale(mean_field_ou(), 16, 0.3, 0.1, FAST, seed=2)
    perm = np.random.default_rng(0).permutation(16)
    for k in range(run.t.size):
        a = run.measure(k)
        b = MeasureHandle.empirical(run.X[perm, k])
        assert a.fingerprint == b.fingerprint


def test_control_scaling_enters_with_inverse_a_sqrt_n():
    model = ou_linear()
    h = ControlField.constant(1.0, 0.0)
    base = simulate_multiscale(model, 16, 0.3, 0.2, FAST, seed=1)
    a = simulate_multiscale(model, 16, 0.3, 0.2, FAST, seed=1, control=h, a_N=0.5)
    # sigma h1 / (a_N sqrt N) = 1 / (0.5 * 4) shifts X by t/2
    np.testing.assert_allclose(a.X - base.X, np.broadcast_to(0.5 * a.t, a.X.shape), atol=1e-12)


def test_csv_export(tmp_path):
    run = simulate_multiscale(ou_linear(), 3, 0.3, 0.04, FAST, seed=0,
                              control=ControlField.constant(0.5))
    path = tmp_path / "run.csv"
    run.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,i,X,Y,u1,u2"
    assert len(lines) == 1 + 3 * run.t.size
    assert float(lines[-1].split(",")[4]) == 0.5
