import numpy as np
import pytest

from safeexplore import envs, gp, theory
from safeexplore.theory import PolicyPair, ToySystem
from oracles import distance_loop

TOY = ToySystem()
CONST = theory.toy_constants(TOY)


def test_constants_are_certified():
    assert theory.certify_constants(TOY, CONST)
    assert not theory.certify_constants(TOY, theory.toy_constants(TOY, 0.5))


def test_constants_validation():
    with pytest.raises(ValueError):
        theory.LipschitzConstants(0.0, 1.0, 1.0, 0.1, 3)
    with pytest.raises(ValueError):
        PolicyPair(np.tanh, np.tanh, M=0)


def test_distance_of_policy_to_itself_is_exactly_zero():
    pair = theory.random_pair(TOY, 0)
    d, se = theory.policy_distance_D(PolicyPair(pair.pi, pair.pi, 500), TOY, CONST, seed=3)
    assert d == 0.0 and se == 0.0


def test_distance_saturates():
    far = PolicyPair(lambda s: np.full_like(s, -1e6), lambda s: np.full_like(s, 1e6), 50)
    d, _ = theory.policy_distance_D(far, TOY, CONST)
    assert d == pytest.approx(TOY.T * (2 * CONST.C_max + TOY.T * CONST.C_max))


@pytest.mark.parametrize("seed", [0, 1])
def test_distance_matches_loop_estimator(seed):
    pair = theory.random_pair(TOY, seed, M=10_000)
    d, se = theory.policy_distance_D(pair, TOY, CONST, seed=seed)
    ref, ref_se = distance_loop(pair.pi, pair.pi_prime, TOY.a, TOY.b, TOY.sigma, TOY.T, TOY.s0,
                                CONST.L_f, CONST.L_c, CONST.C_max, 2000, np.random.default_rng(99))
    assert d >= 0
    assert abs(d - ref) <= 3 * np.hypot(se, ref_se)


def test_distance_consistent_across_sample_sizes():
    pair = theory.random_pair(TOY, 5)
    a, sa = theory.policy_distance_D(PolicyPair(pair.pi, pair.pi_prime, 5000), TOY, CONST, seed=1)
    b, sb = theory.policy_distance_D(PolicyPair(pair.pi, pair.pi_prime, 10_000), TOY, CONST, seed=2)
    assert abs(a - b) <= 3 * np.hypot(sa, sb)


def test_cost_comparison_identical_policies():
    pair = theory.random_pair(TOY, 1)
    r = theory.check_cost_comparison(PolicyPair(pair.pi, pair.pi, 2000), TOY, CONST, seed=0)
    assert r.passed


def test_cost_comparison_random_pairs():
    rng = np.random.default_rng(11)
    results = [theory.check_cost_comparison(theory.random_pair(TOY, rng), TOY, CONST, seed=i) for i in range(20)]
    assert all(r.passed for r in results)


def test_performance_difference_self_pair():
    small = ToySystem(T=3)
    pair = theory.random_pair(small, 2, M=4000)
    r = theory.check_performance_difference(PolicyPair(pair.pi, pair.pi, 4000), small, seed=0, inner=16)
    assert r.passed


def test_performance_difference_random_pair():
    small = ToySystem(T=3)
    r = theory.check_performance_difference(theory.random_pair(small, 7, M=20_000), small, seed=1, inner=32)
    assert r.passed


@pytest.mark.parametrize("seed", range(5))
def test_performance_difference_exact(seed):
    exact = ToySystem(T=2, sigma=0.0)
    r = theory.exact_performance_difference(theory.random_pair(exact, seed), exact)
    assert r.estimate <= 1e-12


def test_exact_recursion_requires_no_noise():
    with pytest.raises(ValueError):
        theory.exact_performance_difference(theory.random_pair(TOY, 0), TOY)


def test_performance_difference_horizon_limit():
    with pytest.raises(ValueError):
        theory.check_performance_difference(theory.random_pair(TOY, 0), ToySystem(T=6))


def test_check_result_json_schema():
    r = theory.CheckResult("x", float("inf"), 0.1, True)
    assert set(r.to_json()) == {"name", "estimate", "tolerance", "pass"}


# -- calibration -------------------------------------------------------------------------------
def test_grid_shape():
    spec = envs.pendulum_spec()
    grid = theory.calibration_grid(spec, 1000)
    assert grid.shape == (1000, 3)
    assert grid[:, 1].min() == spec.state_low[1] and grid[:, 2].max() == spec.high[0]


def test_prior_band_covers_bounded_function():
    spec = envs.pendulum_spec()
    k = gp.KernelParams.isotropic(4, signal_std=5.0)
    m = gp.prior_model(k, 3, 1e-4)  # zero mean; |f*| <= 8 <= beta * 5
    assert theory.check_calibration(m, spec, 1000, beta=2.0) == 1.0


def test_beta_zero_and_monotone():
    spec = envs.pendulum_spec()
    rng = np.random.default_rng(0)
    s = np.column_stack([rng.uniform(-np.pi, np.pi, 300), rng.uniform(-8, 8, 300)])
    u = rng.uniform(-2, 2, (300, 1))
    Z = np.concatenate([spec.encode(s), u], axis=1)
    m = gp.fit(gp.KernelParams.isotropic(4, signal_std=0.3), Z, spec.encode(envs.dynamics(spec, s, u)), 1e-4,
               prior_mean="identity")
    assert theory.check_calibration(m, spec, 1000, beta=0.0) < 0.01
    covs = [theory.check_calibration(m, spec, 1000, beta=b) for b in (0.0, 0.5, 1.0, 2.0, 4.0)]
    assert all(b >= a for a, b in zip(covs, covs[1:]))


def test_mc_pessimism_with_exact_model_is_tight():
    spec = envs.pendulum_spec()
    from safeexplore.agent import OracleModel

    frac = theory.check_mc_pessimism(OracleModel(spec), spec, [[0.0, 5.0], [3.0, 0.0]], 0, n_sequences=20)
    assert frac == 1.0
