"""Check suites behind the ``check`` subcommand.

Every suite returns a list of :class:`~safeexplore.theory.CheckResult`;
results with ``gating=False`` (negative controls, soft checks) are
reported but never decide the exit status.
"""
from __future__ import annotations

import math
import time

import numpy as np

from . import agent, envs, gp, planner, theory
from .theory import CheckResult

SUITES = ("gp-oracle", "calibration", "lemmas", "planner-props")


# -- GP oracle ----------------------------------------------------------------------------
def _dense_reference(Z, Y, Q, lengthscales, signal_std, noise_var):
    """Posterior by an explicit dense solve, kernel built by broadcasting differences."""
    def k(A, B):
        diff = (A[:, None, :] - B[None, :, :]) / np.asarray(lengthscales)
        return signal_std**2 * np.exp(-0.5 * np.sum(diff**2, axis=-1))

    K = k(Z, Z) + noise_var * np.eye(len(Z))
    kq = k(Z, Q)
    mean = kq.T @ np.linalg.solve(K, Y)
    var = signal_std**2 - np.einsum("ij,ij->j", kq, np.linalg.solve(K, kq))
    return mean, var


def _rel(a, b) -> float:
    scale = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / scale) if scale > 0 else float(np.linalg.norm(a - b))


def gp_oracle_errors(seed: int = 0, datasets: int = 100, max_n: int = 50, max_dim: int = 5):
    """Worst relative errors of posterior mean and variance against the dense reference."""
    rng = np.random.default_rng(seed)
    worst_mean = worst_var = 0.0
    for _ in range(datasets):
        n = int(rng.integers(1, max_n + 1))
        d = int(rng.integers(1, max_dim + 1))
        d_out = int(rng.integers(1, 4))
        Z = rng.uniform(-2, 2, size=(n, d))
        Y = rng.normal(size=(n, d_out))
        ls = tuple(rng.uniform(0.5, 2.0, size=d))
        sf = float(rng.uniform(0.5, 2.0))
        noise = float(10 ** rng.uniform(-3, -1))
        model = gp.fit(gp.KernelParams("se", ls, sf), Z, Y, noise)
        Q = rng.uniform(-3, 3, size=(20, d))
        mean, std = model.predict(Q)
        ref_mean, ref_var = _dense_reference(Z, Y, Q, ls, sf, noise)
        worst_mean = max(worst_mean, _rel(mean, ref_mean))
        worst_var = max(worst_var, _rel(std**2, np.maximum(ref_var, gp.STD_FLOOR**2)))
    return worst_mean, worst_var


def gp_oracle_suite(seed: int = 0) -> list[CheckResult]:
    m, v = gp_oracle_errors(seed)
    return [CheckResult("gp_oracle_mean", m, 1e-8, m <= 1e-8),
            CheckResult("gp_oracle_variance", v, 1e-8, v <= 1e-8)]


# -- calibration ----------------------------------------------------------------------------
def _random_data_model(spec, config, seed, episodes=3):
    data = agent.Dataset(spec)
    for k in range(episodes):
        env_rng, pol_rng = agent._seed_rng(seed, k).spawn(2)
        data.add(envs.rollout_true(spec, agent.UniformPolicy(spec, pol_rng), rng=env_rng))
    return agent.fit_model(spec, config, data)


def calibration_suite(seed: int = 0, config: agent.AgentConfig | None = None) -> list[CheckResult]:
    spec = envs.pendulum_spec()
    config = config or agent.AgentConfig(**agent.desk_profile("pendulum"))
    prior = agent.fit_model(spec, config, agent.Dataset(spec))
    fitted = _random_data_model(spec, config, seed)
    grid = theory.calibration_grid(spec, 1000)
    cov_prior = theory.check_calibration(prior, spec, grid=grid, beta=config.beta)
    cov = theory.check_calibration(fitted, spec, grid=grid, beta=config.beta)
    betas = (0.0, 0.5, 1.0, 2.0, 3.0)
    covs = [theory.check_calibration(fitted, spec, grid=grid, beta=b) for b in betas]
    monotone = all(b >= a for a, b in zip(covs, covs[1:]))
    return [
        CheckResult("calibration_prior", cov_prior, 0.9, cov_prior >= 0.9),
        CheckResult("calibration_random_data", cov, 0.9, cov >= 0.9),
        CheckResult("calibration_monotone_in_beta", float(monotone), 1.0, monotone),
        CheckResult("calibration_beta_zero", covs[0], 0.0, True, gating=False),
    ]


# -- lemmas --------------------------------------------------------------------------------------
def lemma_suite(seed: int = 0, pairs: int = 20, M: int = 10_000) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    toy = theory.ToySystem()
    const = theory.toy_constants(toy)
    out = [CheckResult("lipschitz_certified", 1.0, 0.0, theory.certify_constants(toy, const))]
    n_pass = 0
    for i in range(pairs):
        pair = theory.random_pair(toy, rng, M)
        r = theory.check_cost_comparison(pair, toy, const, seed=rng.integers(2**32))
        n_pass += r.passed
    out.append(CheckResult("cost_comparison_pairs", n_pass, pairs, n_pass == pairs))
    pair = theory.random_pair(toy, rng, M)
    same = theory.PolicyPair(pair.pi, pair.pi, M)
    d_same, _ = theory.policy_distance_D(same, toy, const, seed)
    out.append(CheckResult("distance_self_zero", d_same, 0.0, d_same == 0.0))
    sat = theory.PolicyPair(lambda s: np.full_like(s, -1e6), lambda s: np.full_like(s, 1e6), 100)
    d_sat, _ = theory.policy_distance_D(sat, toy, const, seed)
    expected = toy.T * (2 * const.C_max + toy.T * const.C_max)
    out.append(CheckResult("distance_saturated", d_sat, expected, abs(d_sat - expected) <= 1e-9 * expected))
    # negative control: constants far below the valid ones may break the bound
    neg = [theory.check_cost_comparison(theory.random_pair(toy, rng, M), toy, theory.toy_constants(toy, 0.05),
                                        seed=rng.integers(2**32)).passed for _ in range(5)]
    out.append(CheckResult("cost_comparison_invalid_constants", float(np.mean(neg)), 1.0, True, gating=False))
    small = theory.ToySystem(T=3)
    for i in range(3):
        pair = theory.random_pair(small, rng, 20_000)
        out.append(theory.check_performance_difference(pair, small, seed=rng.integers(2**32), inner=32,
                                                       name=f"performance_difference_{i}"))
    exact = theory.ToySystem(T=2, sigma=0.0)
    out.append(theory.exact_performance_difference(theory.random_pair(exact, rng), exact))
    return out


# -- planner properties -------------------------------------------------------------------------
def _random_instance(rng):
    spec = envs.pendulum_spec() if rng.random() < 0.5 else envs.cartpole_spec()
    d_in = spec.d_model + spec.d_a
    n = int(rng.integers(0, 30))
    kernel = gp.KernelParams.isotropic(d_in, float(rng.uniform(0.5, 2.0)), float(rng.uniform(0.1, 1.0)))
    s = rng.uniform(-3, 3, size=(n, spec.d_s))
    u = rng.uniform(spec.low, spec.high, size=(n, spec.d_a))
    Z = np.concatenate([spec.encode(s), u], axis=1) if n else np.zeros((0, d_in))
    Y = spec.encode(envs.dynamics(spec, s, u)) if n else np.zeros((0, spec.d_model))
    model = gp.fit(kernel, Z, Y, 1e-4, prior_mean="identity")
    cfg = planner.PlannerConfig(
        horizon=int(rng.integers(1, 8)), particles=int(rng.integers(1, 5)),
        population=int(rng.integers(4, 24)), elites=2, icem_iters=int(rng.integers(1, 5)),
        momentum=float(rng.uniform(0, 0.9)), objective_mode=str(rng.choice(["intrinsic", "extrinsic"])),
        constraint_mode=str(rng.choice(["pessimistic", "mean-only", "off"])),
        fallback=str(rng.choice(["zero", "best"])),
    )
    s0 = spec.initial_state + rng.normal(scale=0.5, size=spec.d_s)
    return spec, model, cfg, s0


def planner_props(seed: int = 0, instances: int = 200) -> dict:
    """Counts of instances satisfying each planner property."""
    rng = np.random.default_rng(seed)
    ok = {"elite_monotone": 0, "pessimism_dominance": 0, "action_bounds": 0}
    for _ in range(instances):
        spec, model, cfg, s0 = _random_instance(rng)
        result = planner.plan(model, spec, s0, cfg, rng=rng.integers(2**32))
        hist = result.history
        ok["elite_monotone"] += all(b >= a for a, b in zip(hist, hist[1:]))
        ok["action_bounds"] += bool(np.all(result.actions >= spec.low) and np.all(result.actions <= spec.high))
        acts = rng.uniform(spec.low, spec.high, size=(8, cfg.horizon, spec.d_a))
        eps = rng.standard_normal((8, cfg.particles, cfg.horizon, model.d_out))
        x0 = spec.encode(s0)
        _, pess = planner.evaluate_batch(model, spec, x0, acts, eps, "intrinsic", "pessimistic")
        _, mean_only = planner.evaluate_batch(model, spec, x0, acts, eps, "intrinsic", "mean-only")
        ok["pessimism_dominance"] += bool(np.all(pess >= mean_only))
    return ok


def planner_suite(seed: int = 0, instances: int = 200) -> list[CheckResult]:
    counts = planner_props(seed, instances)
    return [CheckResult(name, n, instances, n == instances) for name, n in counts.items()]


# -- driver ------------------------------------------------------------------------------------------
_RUNNERS = {
    "gp-oracle": gp_oracle_suite,
    "calibration": calibration_suite,
    "lemmas": lemma_suite,
    "planner-props": planner_suite,
}


def run_suite(name: str, seed: int = 0) -> list[CheckResult]:
    names = SUITES if name == "all" else (name,)
    unknown = [n for n in names if n not in _RUNNERS]
    if unknown:
        raise KeyError(f"unknown suite {unknown[0]!r}; choose from {SUITES + ('all',)}")
    results = []
    for n in names:
        t0 = time.perf_counter()
        results.extend(_RUNNERS[n](seed))
        results.append(CheckResult(f"{n}_runtime_s", time.perf_counter() - t0, math.inf, True, gating=False))
    return results
