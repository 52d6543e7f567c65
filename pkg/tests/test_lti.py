import numpy as np
import pytest
from hypothesis import given, strategies as st

from fdi_workbench.errors import ConfigError
from fdi_workbench.lti import (
    AttackVector, SimState, SystemModel, initial_state, residue_cov, simulate,
    steady_state_error_cov, step, ttc_model,
)
from fdi_workbench.region import Box

ZERO_W = np.zeros(2)
ZERO_V = np.zeros(1)


def _state(x, x_hat=(0.0, 0.0), u=(0.0,)):
    return SimState(0, np.array(x, float), np.array(x_hat, float), np.array(u, float))


@pytest.mark.parametrize("x, expected", [([1.0, 0.0], [1.0, 0.0]), ([0.0, 1.0], [0.1, 1.0])])
def test_step_open_loop_hand_products(ttc, x, expected):
    nxt = step(ttc, _state(x), AttackVector.zero(ttc), ZERO_W, ZERO_V)
    np.testing.assert_allclose(nxt.x, expected, atol=1e-15)


def test_origin_is_fixed_point(ttc):
    s = initial_state(ttc, [0.0, 0.0])
    nxt = step(ttc, s, AttackVector.zero(ttc), ZERO_W, ZERO_V)
    assert np.all(nxt.x == 0) and np.all(nxt.x_hat == 0) and np.all(nxt.u == 0)


def test_step_ordering_and_residue(ttc):
    s = _state([2.0, -1.0], [1.5, -0.5], [0.3])
    att = AttackVector(np.array([0.7]), np.array([-2.0]))
    w, v = np.array([0.01, -0.02]), np.array([0.005])
    nxt = step(ttc, s, att, w, v)
    u_tilde = s.u + att.a_u
    y = ttc.C @ s.x + ttc.D @ u_tilde + v + att.a_y
    r = y - ttc.C @ s.x_hat
    np.testing.assert_array_equal(nxt.x, ttc.A @ s.x + ttc.B @ u_tilde + w)
    np.testing.assert_array_equal(nxt.x_hat, ttc.A @ s.x_hat + ttc.B @ s.u + ttc.L @ r)
    np.testing.assert_array_equal(nxt.u, -ttc.K @ nxt.x_hat)


@given(st.lists(st.floats(-20, 20), min_size=2, max_size=2),
       st.lists(st.floats(-20, 20), min_size=2, max_size=2),
       st.floats(-1, 1), st.floats(-1, 1))
def test_zero_attack_reduces_to_nominal_update(x, x_hat, wn, vn):
    model = ttc_model()
    s = initial_state(model, x, x_hat)
    w, v = np.array([wn, -wn]) * 1e-2, np.array([vn]) * 1e-2
    nxt = step(model, s, AttackVector.zero(model), w, v)
    r = model.C @ s.x + v - model.C @ s.x_hat
    assert np.array_equal(nxt.x, model.A @ s.x + model.B @ s.u + w)
    assert np.array_equal(nxt.x_hat, model.A @ s.x_hat + model.B @ s.u + model.L @ r)


def test_step_rejects_wrong_dimensions(ttc):
    with pytest.raises(ConfigError):
        step(ttc, _state([1.0, 0.0]), AttackVector(np.zeros(2), np.zeros(1)), ZERO_W, ZERO_V)
    with pytest.raises(ConfigError):
        step(ttc, _state([1.0, 0.0]), AttackVector.zero(ttc), np.zeros(3), ZERO_V)


def _scalar(sigma_w=0.01, sigma_v=0.01):
    return SystemModel(A=[[0.5]], B=[[1.0]], C=[[1.0]], K=[[0.0]], L=[[0.5]],
                       sigma_w=[[sigma_w]], sigma_v=[[sigma_v]])


def test_scalar_error_and_residue_covariance():
    model = _scalar()
    assert steady_state_error_cov(model)[0, 0] == pytest.approx(0.0125, abs=1e-15)
    assert residue_cov(model)[0, 0] == pytest.approx(0.0225, abs=1e-15)


def test_noiseless_process_gives_vanishing_error_covariance():
    # sigma_v must stay positive definite, so use a negligible value
    model = _scalar(sigma_w=0.0, sigma_v=1e-300)
    assert np.all(steady_state_error_cov(model) < 1e-299)
    np.testing.assert_allclose(residue_cov(model), model.sigma_v, rtol=0, atol=1e-299)


def test_ttc_error_covariance_solves_lyapunov(ttc):
    S = steady_state_error_cov(ttc)
    F = ttc.A - ttc.L @ ttc.C
    lhs = F @ S @ F.T + ttc.sigma_w + ttc.L @ ttc.sigma_v @ ttc.L.T
    assert np.max(np.abs(lhs - S)) < 1e-10
    assert np.allclose(S, S.T) and np.all(np.linalg.eigvalsh(S) > 0)
    diff = ttc.sigma_r - ttc.sigma_v
    assert np.all(np.linalg.eigvalsh(diff) >= -1e-15)
    # frozen oracle from an independent scipy Lyapunov solve
    assert ttc.sigma_r[0, 0] == pytest.approx(6.8357e-4, rel=1e-4)


def test_model_rejects_unstable_gains():
    base = dict(A=[[1.0, 0.1], [0.0, 1.0]], B=[[0.005], [0.1]], C=[[1.0, 0.0]],
                sigma_w=np.eye(2) * 1e-4, sigma_v=[[1e-4]])
    with pytest.raises(ConfigError, match="A - BK"):
        SystemModel(K=[[0.0, 0.0]], L=[[1.8721], [9.6532]], **base)
    with pytest.raises(ConfigError, match="A - LC"):
        SystemModel(K=[[16.0302, 5.6622]], L=[[0.0], [0.0]], **base)


def test_model_rejects_bad_covariances_and_shapes():
    with pytest.raises(ConfigError):
        ttc_model(sigma_v=[[0.0]])
    with pytest.raises(ConfigError):
        ttc_model(sigma_w=[[1e-4, 0.0], [0.0, -1e-4]])
    with pytest.raises(ConfigError):
        ttc_model(K=[[1.0, 2.0, 3.0]])


def test_ttc_spectral_radii(ttc):
    rho_lc = max(abs(np.linalg.eigvals(ttc.A - ttc.L @ ttc.C)))
    assert rho_lc == pytest.approx(np.sqrt(0.0932), abs=1e-3)
    assert max(abs(np.linalg.eigvals(ttc.A - ttc.B @ ttc.K))) < 1


def test_simulate_zero_noise_all_zero():
    model = ttc_model(sigma_w=np.zeros((2, 2)), sigma_v=[[1e-300]])
    trace = simulate(model, 20, seed=0, x0=[0.0, 0.0])
    assert len(trace) == 20
    assert np.max(np.abs(trace.column("x"))) < 1e-140


def test_simulate_deterministic_and_indexed(ttc):
    a = simulate(ttc, 50, seed=3, x0=[1.0, 2.0])
    b = simulate(ttc, 50, seed=3, x0=[1.0, 2.0])
    assert [r.k for r in a.rows] == list(range(50))
    for ra, rb in zip(a.rows, b.rows):
        assert np.array_equal(ra.x, rb.x) and np.array_equal(ra.r, rb.r)


def test_simulate_stays_in_safe_region(ttc):
    x_s = Box([-25.0, -30.0], [25.0, 30.0])
    x_r = x_s.scale(0.3)
    rng = np.random.default_rng(11)
    for seed in range(100):
        trace = simulate(ttc, 500, seed=seed, x0=x_r.sample(rng))
        assert x_s.contains(trace.final_state.x)


def test_alarm_iff_g_exceeds_threshold(ttc):
    trace = simulate(ttc, 200, detector_policy=lambda obs: (1.5, 2), seed=5, x0=[0.0, 0.0])
    g, th, alarm = trace.column("g"), trace.column("th"), trace.column("alarm")
    assert np.array_equal(alarm, g > th)


def test_divergence_halts_with_flag():
    model = ttc_model()
    huge = lambda obs: AttackVector(np.zeros(1), np.array([1e9]))
    trace = simulate(model, 200, attack_policy=huge, seed=0, x0=[0.0, 0.0])
    assert trace.diverged and len(trace) < 200 and trace.message


@pytest.fixture(scope="module")
def long_run():
    model = ttc_model()
    trace = simulate(model, 100_000, seed=99, x0=[0.0, 0.0])
    return model, trace


def test_estimation_error_centered(long_run):
    _, trace = long_run
    e = (trace.column("x") - trace.column("x_hat"))[100:]
    bound = 4 * e.std(axis=0) / np.sqrt(len(e))
    assert np.all(np.abs(e.mean(axis=0)) < bound)


def test_empirical_residue_covariance(long_run):
    model, trace = long_run
    r = trace.column("r")[100:]
    emp = r.T @ r / len(r)
    np.testing.assert_allclose(emp, model.sigma_r, rtol=0.1)
