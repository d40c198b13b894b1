import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from safeexplore import envs
from safeexplore.envs import cartpole_spec, pendulum_spec


def zero(spec):
    return np.zeros(spec.d_s)


def test_pendulum_rest_is_fixed_point():
    spec = pendulum_spec()
    s = np.array([np.pi, 0.0])
    np.testing.assert_allclose(envs.true_step(spec, s, [0.0], zero(spec)), s, atol=1e-12)


def test_cartpole_rest_is_fixed_point():
    spec = cartpole_spec()
    s = np.array([0.0, 0.0, np.pi, 0.0])
    np.testing.assert_allclose(envs.true_step(spec, s, [0.0], zero(spec)), s, atol=1e-12)


def _fine_pendulum(th, om, dt, n=20000, g=9.81):
    # independent RK4 reference with tiny steps
    h = dt / n
    f = lambda th, om: (om, g * np.sin(th))  # noqa: E731
    for _ in range(n):
        k1 = f(th, om)
        k2 = f(th + h / 2 * k1[0], om + h / 2 * k1[1])
        k3 = f(th + h / 2 * k2[0], om + h / 2 * k2[1])
        k4 = f(th + h * k3[0], om + h * k3[1])
        th += h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        om += h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    return th, om


@pytest.mark.parametrize("theta", [np.pi / 2, -np.pi / 2])
def test_gravity_pulls_toward_bottom(theta):
    spec = pendulum_spec()
    nxt = envs.true_step(spec, np.array([theta, 0.0]), [0.0], zero(spec))
    ref_th, ref_om = _fine_pendulum(theta, 0.0, spec.dt)
    # the hanging position is theta = pi, so from +pi/2 omega grows, from -pi/2 it falls
    assert np.sign(nxt[1]) == np.sign(theta)
    np.testing.assert_allclose(nxt, [ref_th, ref_om], atol=1e-4)


def test_pendulum_reward_examples():
    spec = pendulum_spec()
    assert envs.reward(spec, [0.0, 0.0], [0.0]) == 0.0
    assert envs.reward(spec, [0.0, 1.0], [1.0]) == pytest.approx(-0.12)


def test_cartpole_reward_example():
    spec = cartpole_spec()
    assert envs.reward(spec, [1.0, 0.0, 0.0, 0.0], [0.0]) == pytest.approx(-1.0)


@pytest.mark.parametrize("omega,expected", [(7.0, 1.0), (3.0, 0.0), (-7.5, 1.5)])
def test_pendulum_cost(omega, expected):
    assert envs.cost(pendulum_spec(), [0.0, omega]) == pytest.approx(expected)


def test_cartpole_cost():
    assert envs.cost(cartpole_spec(), [1.0, 0.0, 0.0, 0.0]) == pytest.approx(0.5)
    assert envs.cost(cartpole_spec(), [0.3, 5.0, 1.0, 9.0]) == 0.0


@given(st.floats(-20, 20), st.floats(-8, 8), st.integers(-3, 3))
def test_reward_invariant_to_full_turns(theta, omega, k):
    spec = pendulum_spec()
    a = envs.reward(spec, [theta, omega], [0.5])
    b = envs.reward(spec, [theta + 2 * np.pi * k, omega], [0.5])
    assert a == pytest.approx(b, abs=1e-9)


@given(st.floats(-np.pi, np.pi), st.floats(-8, 8))
def test_encode_decode_roundtrip(theta, omega):
    spec = pendulum_spec()
    x = spec.encode([theta, omega])
    assert x[0] ** 2 + x[1] ** 2 == pytest.approx(1.0, abs=1e-6)
    back = spec.decode(x)
    assert envs.wrap_angle(back[0] - theta) == pytest.approx(0.0, abs=1e-9)
    assert back[1] == omega


def test_nonfinite_state_rejected():
    spec = pendulum_spec()
    with pytest.raises(envs.InvalidStateError):
        envs.true_step(spec, [np.nan, 0.0], [0.0], zero(spec))


def test_noise_dimension_checked():
    spec = pendulum_spec()
    with pytest.raises(ValueError):
        envs.true_step(spec, [0.0, 0.0], [0.0], np.zeros(3))


def test_spec_validation():
    with pytest.raises(ValueError):
        pendulum_spec(horizon=0)
    with pytest.raises(ValueError):
        pendulum_spec(noise_std=-1.0)


@pytest.mark.parametrize("make", [pendulum_spec, cartpole_spec])
def test_zero_policy_from_rest_is_constant(make):
    spec = make(noise_std=0.0, horizon=50)
    traj = envs.rollout_true(spec, lambda s: np.zeros(1), rng=0)
    np.testing.assert_allclose(traj.states, np.tile(spec.initial_state, (51, 1)), atol=1e-12)
    r0 = envs.reward(spec, spec.initial_state, [0.0])
    assert traj.J_r == pytest.approx(r0 * 50)
    assert traj.J_c == 0.0


@pytest.mark.parametrize("make", [pendulum_spec, cartpole_spec])
def test_rollout_costs_and_determinism(make):
    spec = make(horizon=60)
    rng = np.random.default_rng(3)
    table = rng.uniform(spec.low, spec.high, size=(60, 1))
    it = iter(range(60))
    policy = lambda s: table[next(it)]  # noqa: E731
    a = envs.rollout_true(spec, policy, rng=11)
    it = iter(range(60))
    b = envs.rollout_true(spec, policy, rng=11)
    assert np.array_equal(a.states, b.states)
    assert np.all(a.costs >= 0)
    assert a.J_c == pytest.approx(a.costs.sum())
    assert len(a.states) == 61 and len(a.rewards) == 60


def test_bang_bang_pendulum_hits_cost_bounds():
    spec = pendulum_spec(horizon=400)
    traj = envs.rollout_true(spec, lambda s: np.array([2.0 * np.sign(s[1] or 1.0)]), rng=0)
    assert traj.costs.max() > 0
    assert np.all(traj.costs <= spec.max_cost + 1e-12)


def test_out_of_bounds_actions_clipped_and_counted():
    spec = pendulum_spec(horizon=10)
    traj = envs.rollout_true(spec, lambda s: np.array([5.0]), rng=0)
    assert traj.clipped_actions == 10
    assert np.all(traj.actions == 2.0)


def test_rollout_error_carries_partial():
    spec = pendulum_spec(horizon=10)
    calls = iter(range(100))

    def policy(s):
        return np.array([np.nan]) if next(calls) == 4 else np.zeros(1)

    with pytest.raises(envs.RolloutError) as exc:
        envs.rollout_true(spec, policy, rng=0)
    assert len(exc.value.partial.actions) == 5


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 3.0), st.floats(-3.0, 3.0))
def test_energy_nonincreasing_without_torque(theta, omega):
    spec = pendulum_spec(noise_std=0.0)
    g = spec.params["gravity"]
    energy = lambda s: 0.5 * s[1] ** 2 + g * np.cos(s[0])  # noqa: E731
    s = np.array([theta, omega])
    for _ in range(100):
        nxt = envs.true_step(spec, s, [0.0], np.zeros(2))
        if abs(nxt[1]) >= spec.state_high[1]:
            break  # the speed clip removes energy, never adds it
        assert energy(nxt) - energy(s) <= 1e-3
        s = nxt
