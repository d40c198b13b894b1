import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from safeexplore import envs, gp, planner
from safeexplore.planner import PlannerConfig


def pendulum_prior(signal_std=0.5):
    spec = envs.pendulum_spec()
    k = gp.KernelParams.isotropic(spec.d_model + spec.d_a, signal_std=signal_std)
    return spec, gp.prior_model(k, spec.d_model, 1e-4, prior_mean="identity")


def fitted_pendulum(n=40, seed=0):
    spec = envs.pendulum_spec()
    rng = np.random.default_rng(seed)
    s = np.column_stack([rng.uniform(-np.pi, np.pi, n), rng.uniform(-6, 6, n)])
    u = rng.uniform(-2, 2, size=(n, 1))
    Z = np.concatenate([spec.encode(s), u], axis=1)
    k = gp.KernelParams.isotropic(4, signal_std=0.3)
    return spec, gp.fit(k, Z, spec.encode(envs.dynamics(spec, s, u)), 1e-4, prior_mean="identity")


class BumpModel:
    """Frozen dynamics whose uncertainty peaks at action ``a_star``."""

    def __init__(self, d_out, a_star):
        self.d_out, self.a_star = d_out, a_star

    def predict(self, Z):
        a = Z[:, -1]
        return Z[:, : self.d_out].copy(), np.maximum(1.0 - (a - self.a_star) ** 2, 1e-9)


# -- intrinsic reward / penalty ------------------------------------------------------------
def test_intrinsic_reward_prior():
    spec, m = pendulum_prior(0.5)
    z = np.concatenate([spec.encode(spec.initial_state), [0.3]])
    assert planner.intrinsic_reward(m, z) == pytest.approx(math.sqrt(3) * 0.5)


def test_intrinsic_reward_small_at_observed_point():
    spec = envs.pendulum_spec()
    z = np.array([[0.2, 0.4, 0.1, 0.5]])
    k = gp.KernelParams.isotropic(4)
    m = gp.fit(k, np.repeat(z, 5, axis=0), np.zeros((5, 3)), 1e-6)
    assert planner.intrinsic_reward(m, z[0]) <= 0.01 * math.sqrt(3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000))
def test_intrinsic_reward_bounded(seed):
    spec, m = fitted_pendulum(10, seed)
    z = np.random.default_rng(seed).normal(size=4)
    assert 0 < planner.intrinsic_reward(m, z) <= math.sqrt(3) * 0.3 + 1e-9


def test_penalized_score_examples():
    assert planner.penalized_score(3.0, 0.75, 0.75, 1000) == 3.0
    assert planner.penalized_score(1.0, 0.5, 0.0, 1000) == pytest.approx(-499.0)
    assert planner.penalized_score(1.0, 99.0, 0.0, 0.0) == 1.0
    assert planner.penalized_score(1.0, -np.inf, 0.0, 1000) == 1.0


# -- candidate evaluation ------------------------------------------------------------------
def test_single_particle_without_uncertainty_is_mean_rollout():
    spec, m = fitted_pendulum()

    class Exact:
        d_out = 3

        def predict(self, Z):
            mean, _ = m.predict(Z)
            return mean, np.full(len(Z), 1e-12)

    acts = np.random.default_rng(1).uniform(-2, 2, size=(6, 1))
    s0 = np.array([2.5, 1.0])
    obj, con = planner.evaluate_candidate(Exact(), spec, s0, acts, 1, 0, "extrinsic", "pessimistic")
    x, r, c = spec.encode(s0), 0.0, 0.0
    for a in acts:
        r += envs.reward_encoded(spec, x, a)
        x = m.predict(np.concatenate([x, a])[None])[0][0]
        c += envs.cost_encoded(spec, x)
    assert obj == pytest.approx(r, rel=1e-9)
    assert con == pytest.approx(c, abs=1e-9)


def test_three_particles_one_step_enumeration():
    spec, m = fitted_pendulum()
    s0 = np.array([0.3, 5.8])
    act = np.array([[1.5]])
    rng = np.random.default_rng(4)
    eps = rng.standard_normal((1, 3, 1, 3))
    obj, con = planner.evaluate_batch(m, spec, spec.encode(s0), act[None], eps, "intrinsic", "pessimistic")
    z = np.concatenate([spec.encode(s0), act[0]])
    mean, std = m.predict(z[None])
    costs = [envs.cost_encoded(spec, mean[0] + std[0] * eps[0, p, 0]) for p in range(3)]
    costs.append(envs.cost_encoded(spec, mean[0]))  # the nominal rollout joins the pessimistic max
    assert con[0] == pytest.approx(max(costs))
    assert obj[0] == pytest.approx(math.sqrt(3) * std[0])


def test_constraint_modes_and_dominance():
    spec, m = fitted_pendulum()
    rng = np.random.default_rng(2)
    acts = rng.uniform(-2, 2, size=(16, 10, 1))
    eps = rng.standard_normal((16, 5, 10, 3))
    x0 = spec.encode([0.5, 4.0])
    obj_p, pess = planner.evaluate_batch(m, spec, x0, acts, eps, "intrinsic", "pessimistic")
    obj_m, mean_only = planner.evaluate_batch(m, spec, x0, acts, eps, "intrinsic", "mean-only")
    obj_o, off = planner.evaluate_batch(m, spec, x0, acts, eps, "intrinsic", "off")
    assert np.all(pess >= mean_only)
    assert np.all(off == -np.inf)
    np.testing.assert_array_equal(obj_p, obj_m)
    np.testing.assert_array_equal(obj_p, obj_o)


def test_objective_aggregation():
    spec, m = fitted_pendulum()
    rng = np.random.default_rng(3)
    acts = rng.uniform(-2, 2, size=(4, 5, 1))
    eps = rng.standard_normal((4, 6, 5, 3))
    x0 = spec.encode([1.0, 0.0])
    mx, _ = planner.evaluate_batch(m, spec, x0, acts, eps, "extrinsic", "off", "max")
    mn, _ = planner.evaluate_batch(m, spec, x0, acts, eps, "extrinsic", "off", "mean")
    assert np.all(mx >= mn)


def test_nonfinite_rollout_rejected():
    spec = envs.pendulum_spec()

    class Exploding:
        d_out = 3

        def predict(self, Z):
            return np.full((len(Z), 3), np.inf), np.ones(len(Z))

    obj, con = planner.evaluate_candidate(Exploding(), spec, spec.initial_state, np.zeros((3, 1)), 2, 0)
    assert obj == -np.inf and con == np.inf


# -- colored noise / shifting -----------------------------------------------------------------
def test_colored_noise_unit_variance_and_red_spectrum():
    x = planner.colored_noise(2.0, (4000, 64), 0)
    # unit variance excludes the DC term, which adds about 30% at beta = 2 and 64 samples
    assert 1.0 < x.var() < 1.5
    power = np.abs(np.fft.rfft(x, axis=-1)) ** 2
    assert power[:, 1].mean() > 10 * power[:, 20].mean()
    white = planner.colored_noise(0.0, (4000, 64), 0)
    assert white.var() == pytest.approx(1.0, rel=0.05)
    assert abs(np.corrcoef(white[:, :-1].ravel(), white[:, 1:].ravel())[0, 1]) < 0.05


def test_shift_mean():
    m = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(planner.shift_mean(m, 1, np.zeros(2)), [[2, 3], [4, 5], [0, 0]])
    np.testing.assert_array_equal(planner.shift_mean(m, 10, np.ones(2)), np.ones((3, 2)))


# -- plan ---------------------------------------------------------------------------------------
def test_plan_finds_analytic_optimum():
    spec = envs.pendulum_spec()
    cfg = PlannerConfig(horizon=3, particles=2, constraint_mode="off")
    res = planner.plan(BumpModel(3, 0.7), spec, spec.initial_state, cfg, rng=0)
    assert abs(res.actions[0, 0] - 0.7) < 0.05
    assert res.feasible


def test_plan_population_equals_elites():
    spec = envs.pendulum_spec()
    cfg = PlannerConfig(horizon=3, particles=1, population=8, elites=8, constraint_mode="off")
    res = planner.plan(BumpModel(3, -0.4), spec, spec.initial_state, cfg, rng=1)
    assert np.isfinite(res.score)
    assert all(b >= a for a, b in zip(res.history, res.history[1:]))


def test_plan_deterministic():
    spec, m = fitted_pendulum()
    cfg = PlannerConfig(horizon=8, particles=3, population=16, elites=4, icem_iters=3)
    a = planner.plan(m, spec, [0.5, 1.0], cfg, rng=5)
    b = planner.plan(m, spec, [0.5, 1.0], cfg, rng=5)
    np.testing.assert_array_equal(a.actions, b.actions)
    assert a.score == b.score


def test_plan_infeasible_falls_back_to_zero():
    spec, m = pendulum_prior(3.0)  # huge uncertainty: every candidate violates
    cfg = PlannerConfig(horizon=20, particles=5, population=16, elites=4, icem_iters=2)
    res = planner.plan(m, spec, [0.0, 5.9], cfg, rng=0)
    assert not res.feasible
    np.testing.assert_array_equal(res.actions, np.zeros((20, 1)))
    best = planner.plan(m, spec, [0.0, 5.9], PlannerConfig(**{**cfg.__dict__, "fallback": "best"}), rng=0)
    assert not best.feasible and np.any(best.actions != 0)


def test_plan_rejects_nonfinite_state():
    spec, m = pendulum_prior()
    with pytest.raises(envs.InvalidStateError):
        planner.plan(m, spec, [np.nan, 0.0], PlannerConfig(horizon=2, population=4, elites=2))


def test_config_validation():
    with pytest.raises(ValueError):
        PlannerConfig(elites=300, population=256)
    with pytest.raises(ValueError):
        PlannerConfig(momentum=1.0)
    with pytest.raises(ValueError):
        PlannerConfig(objective_mode="greedy")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_plan_properties(seed):
    rng = np.random.default_rng(seed)
    spec, m = fitted_pendulum(20, seed)
    cfg = PlannerConfig(horizon=int(rng.integers(1, 6)), particles=int(rng.integers(1, 4)), population=12,
                        elites=3, icem_iters=int(rng.integers(1, 4)),
                        constraint_mode=str(rng.choice(["pessimistic", "mean-only", "off"])))
    res = planner.plan(m, spec, rng.uniform([-3, -6], [3, 6]), cfg, rng=seed)
    assert np.all(res.actions >= spec.low) and np.all(res.actions <= spec.high)
    assert all(b >= a for a, b in zip(res.history, res.history[1:]))
    assert len(res.history) == cfg.icem_iters
