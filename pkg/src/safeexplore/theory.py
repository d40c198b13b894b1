"""Numerical checks of the analytic claims behind safe exploration.

Lemma-style checks run on a 1D linear-Gaussian toy system
``s' = a*s + b*u + w`` whose Lipschitz constants are known in closed form.
Calibration checks run against the simulators in :mod:`safeexplore.envs`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import envs
from .envs import EnvSpec

Policy = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class CheckResult:
    name: str
    estimate: float
    tolerance: float
    passed: bool
    gating: bool = True  # negative controls and soft checks are reported only

    def to_json(self) -> dict:
        return {"name": self.name, "estimate": _finite_or_str(self.estimate),
                "tolerance": _finite_or_str(self.tolerance), "pass": bool(self.passed)}


def _finite_or_str(x):
    x = float(x)
    return x if math.isfinite(x) else str(x)


# -- toy system ----------------------------------------------------------------------
@dataclass(frozen=True)
class ToySystem:
    """``s' = a s + b u + w`` with ``w ~ N(0, sigma^2)``.

    Reward ``-(s - target)^2 - rho u^2``; cost
    ``min(kappa_s |s| + kappa_a |u|, c_max)`` takes values in ``[0, c_max]``.
    """

    a: float = 0.9
    b: float = 0.5
    sigma: float = 0.3
    T: int = 4
    s0: float = 0.0
    u_max: float = 1.0
    target: float = 1.0
    rho: float = 0.1
    kappa_s: float = 0.5
    kappa_a: float = 1.0
    c_max: float = 1.0

    def __post_init__(self):
        if self.sigma < 0 or self.T < 1 or self.u_max <= 0 or self.c_max <= 0:
            raise ValueError("invalid toy system parameters")

    def mean_step(self, s, u):
        return self.a * s + self.b * u

    def reward(self, s, u):
        return -((s - self.target) ** 2) - self.rho * u**2

    def cost(self, s, u):
        return np.minimum(self.kappa_s * np.abs(s) + self.kappa_a * np.abs(u), self.c_max)


@dataclass(frozen=True)
class LipschitzConstants:
    L_f: float
    L_c: float
    C_max: float
    sigma: float
    T: int

    def __post_init__(self):
        if min(self.L_f, self.L_c, self.C_max) <= 0 or self.sigma < 0 or self.T < 1:
            raise ValueError("Lipschitz constants must be positive")


def toy_constants(sys: ToySystem, scale: float = 1.0) -> LipschitzConstants:
    """Analytic constants w.r.t. the action: ``L_f = |b|``, ``L_c = kappa_a``.

    ``scale < 1`` produces deliberately invalid constants for negative controls.
    """
    return LipschitzConstants(scale * abs(sys.b), scale * sys.kappa_a, sys.c_max, sys.sigma, sys.T)


def certify_constants(sys: ToySystem, constants: LipschitzConstants, n_grid: int = 201,
                      s_range: float = 5.0) -> bool:
    """Brute-force check that finite-difference action slopes never exceed the constants."""
    s = np.linspace(-s_range, s_range, n_grid)[:, None]
    u = np.linspace(-sys.u_max, sys.u_max, n_grid)[None, :]
    du = np.diff(u, axis=1)
    slope_f = np.abs(np.diff(sys.mean_step(s, u), axis=1)) / du
    slope_c = np.abs(np.diff(sys.cost(s, u), axis=1)) / du
    c = sys.cost(s, u)
    return bool(slope_f.max() <= constants.L_f + 1e-9 and slope_c.max() <= constants.L_c + 1e-9
                and c.min() >= 0 and c.max() <= constants.C_max)


@dataclass(frozen=True)
class PolicyPair:
    pi: Policy
    pi_prime: Policy
    M: int = 10_000

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be >= 1")


def tanh_policy(sys: ToySystem, gain: float, offset: float) -> Policy:
    def policy(s):
        return sys.u_max * np.tanh(gain * np.asarray(s, dtype=float) + offset)
    return policy


def random_pair(sys: ToySystem, rng, M: int = 10_000) -> PolicyPair:
    rng = np.random.default_rng(rng)
    g1, o1, g2, o2 = rng.uniform(-2, 2, size=4)
    return PolicyPair(tanh_policy(sys, g1, o1), tanh_policy(sys, g2, o2), M)


def simulate(sys: ToySystem, policy: Policy, M: int, rng, s0=None):
    """``M`` independent rollouts; returns states ``(M, T+1)`` and actions ``(M, T)``."""
    rng = np.random.default_rng(rng)
    s = np.full(M, sys.s0 if s0 is None else s0, dtype=float)
    states = np.empty((M, sys.T + 1))
    actions = np.empty((M, sys.T))
    states[:, 0] = s
    for t in range(sys.T):
        u = policy(s)
        actions[:, t] = u
        s = sys.mean_step(s, u) + sys.sigma * rng.standard_normal(M)
        states[:, t + 1] = s
    return states, actions


def _mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    if len(x) < 2:
        return float(x.mean()), 0.0
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(len(x)))


def _distance_terms(pair: PolicyPair, constants: LipschitzConstants, states):
    """Per-trajectory summands of D evaluated along ``states`` (rollouts of pi')."""
    s = states[:, :-1]
    gap = np.abs(pair.pi_prime(s) - pair.pi(s))
    c = constants
    cost_term = np.minimum(c.L_c * gap, 2 * c.C_max)
    if c.sigma > 0:
        ratio = c.L_f * gap / c.sigma
    else:
        ratio = np.where(gap > 0, np.inf, 0.0)
    dyn_term = c.T * c.C_max * np.minimum(ratio, 1.0)
    return (cost_term + dyn_term).sum(axis=1)


def policy_distance_D(pair: PolicyPair, sys: ToySystem, constants: LipschitzConstants,
                      seed=0) -> tuple[float, float]:
    """Monte-Carlo estimate and standard error of the policy distance ``D(pi, pi')``.

    The expectation is over trajectories of ``pi'`` on the true system.
    """
    states, _ = simulate(sys, pair.pi_prime, pair.M, seed)
    return _mean_se(_distance_terms(pair, constants, states))


def check_cost_comparison(pair: PolicyPair, sys: ToySystem, constants: LipschitzConstants,
                          seed=0, name: str = "cost_comparison", gating: bool = True) -> CheckResult:
    """``J_c(pi) - J_c(pi') <= D(pi, pi')`` up to three combined standard errors.

    The reported estimate is the slack ``D - (J_c(pi) - J_c(pi'))``; ``D`` and
    ``J_c(pi')`` share trajectories so their difference is estimated jointly.
    """
    rng = np.random.default_rng(seed)
    s_a, s_b = rng.spawn(2)
    st_p, act_p = simulate(sys, pair.pi_prime, pair.M, s_a)
    jc_prime = sys.cost(st_p[:, :-1], act_p).sum(axis=1)
    joint = _distance_terms(pair, constants, st_p) + jc_prime
    st, act = simulate(sys, pair.pi, pair.M, s_b)
    jc = sys.cost(st[:, :-1], act).sum(axis=1)
    m_joint, se_joint = _mean_se(joint)
    m_jc, se_jc = _mean_se(jc)
    slack = m_joint - m_jc
    tol = 3 * math.hypot(se_joint, se_jc)
    return CheckResult(name, slack, tol, slack >= -tol, gating)


# -- performance difference ----------------------------------------------------------
def _value_to_go(sys: ToySystem, policy: Policy, s, k: int, inner: int, rng):
    """MC estimate of ``J_{r,k}(policy, s)`` for each entry of ``s`` (shape ``(B,)``)."""
    B = len(s)
    x = np.repeat(np.asarray(s, dtype=float)[:, None], inner, axis=1)
    total = np.zeros((B, inner))
    for _ in range(k, sys.T):
        u = policy(x)
        total += sys.reward(x, u)
        x = sys.mean_step(x, u) + sys.sigma * rng.standard_normal(x.shape)
    return total.mean(axis=1)


def advantage_sum(pair: PolicyPair, sys: ToySystem, rng, inner: int = 64) -> np.ndarray:
    """Per-trajectory ``sum_t A_{r,t}(pi, s'_t, pi'(s'_t))`` along rollouts of ``pi'``.

    Each advantage is estimated by independent inner rollouts of ``pi``, so
    the per-trajectory values are unbiased and their sample variance gives a
    valid standard error for the mean.
    """
    rng = np.random.default_rng(rng)
    states, actions = simulate(sys, pair.pi_prime, pair.M, rng)
    out = np.zeros(pair.M)
    for t in range(sys.T):
        s, u = states[:, t], actions[:, t]
        nxt = sys.mean_step(s, u) + sys.sigma * rng.standard_normal(pair.M)
        out += sys.reward(s, u) + _value_to_go(sys, pair.pi, nxt, t + 1, inner, rng) \
            - _value_to_go(sys, pair.pi, s, t, inner, rng)
    return out


def check_performance_difference(pair: PolicyPair, sys: ToySystem, seed=0, inner: int = 64,
                                 name: str = "performance_difference") -> CheckResult:
    """``J_r(pi') - J_r(pi) = E_{pi'}[sum_t A_{r,t}(pi, s'_t, pi'(s'_t))]`` within 3 SE.

    The reported estimate is the difference between the two sides.
    """
    if sys.T > 5:
        raise ValueError("nested Monte Carlo is limited to T <= 5")
    rng = np.random.default_rng(seed)
    s_a, s_b, s_c = rng.spawn(3)
    st_p, act_p = simulate(sys, pair.pi_prime, pair.M, s_a)
    st, act = simulate(sys, pair.pi, pair.M, s_b)
    m1, se1 = _mean_se(sys.reward(st_p[:, :-1], act_p).sum(axis=1))
    m0, se0 = _mean_se(sys.reward(st[:, :-1], act).sum(axis=1))
    m_adv, se_adv = _mean_se(advantage_sum(pair, sys, s_c, inner))
    gap = (m1 - m0) - m_adv
    tol = 3 * math.sqrt(se1**2 + se0**2 + se_adv**2)
    return CheckResult(name, gap, tol, abs(gap) <= tol)


def exact_performance_difference(pair: PolicyPair, sys: ToySystem, name: str = "performance_difference_exact",
                                 tol: float = 1e-12) -> CheckResult:
    """Noise-free case: both sides follow from the deterministic recursion exactly."""
    if sys.sigma != 0:
        raise ValueError("exact enumeration requires sigma = 0")

    def J(policy, s, k):
        total = 0.0
        for _ in range(k, sys.T):
            u = float(policy(np.array(s)))
            total += float(sys.reward(s, u))
            s = float(sys.mean_step(s, u))
        return total

    lhs = J(pair.pi_prime, sys.s0, 0) - J(pair.pi, sys.s0, 0)
    rhs = 0.0
    s = sys.s0
    for t in range(sys.T):
        u = float(pair.pi_prime(np.array(s)))
        nxt = float(sys.mean_step(s, u))
        rhs += float(sys.reward(s, u)) + J(pair.pi, nxt, t + 1) - J(pair.pi, s, t)
        s = nxt
    gap = abs(lhs - rhs)
    return CheckResult(name, gap, tol, gap <= tol)


# -- calibration ---------------------------------------------------------------------------
def calibration_grid(spec: EnvSpec, grid_size: int = 1000, state_ranges=None) -> np.ndarray:
    """Regular grid of physical ``(state, action)`` points, shape ``(m, d_s + d_a)``.

    The angle spans ``[-pi, pi)``; other state dimensions span ``state_ranges``
    (defaults to the simulator's state bounds), actions span their bounds.
    ``m`` is ``k ** (d_s + d_a)`` with ``k = round(grid_size ** (1 / dim))``.
    """
    dim = spec.d_s + spec.d_a
    k = max(2, int(round(grid_size ** (1.0 / dim))))
    axes = []
    for i in range(spec.d_s):
        if i == spec.angle_index:
            axes.append(np.linspace(-math.pi, math.pi, k, endpoint=False))
            continue
        if state_ranges is not None and state_ranges[i] is not None:
            lo, hi = state_ranges[i]
        else:
            lo, hi = spec.state_low[i], spec.state_high[i]
            if lo is None or hi is None:
                raise ValueError(f"state dimension {i} is unbounded; pass state_ranges")
        axes.append(np.linspace(lo, hi, k))
    for j in range(spec.d_a):
        axes.append(np.linspace(spec.action_low[j], spec.action_high[j], k))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def check_calibration(model, spec: EnvSpec, grid_size: int = 1000, beta: float | None = None,
                      delta: float = 0.1, state_ranges=None, grid=None) -> float:
    """Fraction of (grid point, output dimension) pairs with ``|mu - f*| <= beta * sigma``.

    ``f*`` is the noise-free simulator step in the model's encoded coordinates.
    ``beta`` defaults to the model's own calibration scale; ``delta`` is
    recorded by the model and only documents the target confidence level.
    """
    if grid is None:
        grid = calibration_grid(spec, grid_size, state_ranges)
    s, u = grid[:, : spec.d_s], grid[:, spec.d_s:]
    z = np.concatenate([spec.encode(s), u], axis=1)
    truth = spec.encode(envs.dynamics(spec, s, u))
    mean, std = model.predict(z)
    b = getattr(model, "beta", 2.0) if beta is None else beta
    inside = np.abs(mean - truth) <= b * std[:, None]
    return float(inside.mean())


def check_mc_pessimism(model, spec: EnvSpec, starts, rng, n_sequences: int = 50, particles: int = 10,
                       horizon: int = 40, particle_scale: float = 1.0) -> float:
    """Fraction of random action sequences whose particle-max cost bounds the true cost.

    Start states are drawn from ``starts`` (physical states, e.g. visited
    ones); the true cost comes from noise-free rollouts of the simulator.
    This is a soft empirical counterpart of pessimism, not a guarantee.
    """
    from .planner import evaluate_batch

    rng = np.random.default_rng(rng)
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    hits = 0
    for _ in range(n_sequences):
        s0 = starts[rng.integers(len(starts))]
        acts = rng.uniform(spec.low, spec.high, size=(horizon, spec.d_a))
        eps = particle_scale * rng.standard_normal((1, particles, horizon, model.d_out))
        _, con = evaluate_batch(model, spec, spec.encode(s0), acts[None], eps, "intrinsic", "pessimistic")
        s, true_cost = s0, 0.0
        for a in acts:
            s = envs.dynamics(spec, s, a)
            true_cost += float(envs.cost(spec, s))
        hits += bool(con[0] >= true_cost)
    return hits / n_sequences
