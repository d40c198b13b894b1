"""Receding-horizon iCEM planning through TS1 particle rollouts of a GP model.

Objective estimates are optimistic (max over particles by default) and
constraint estimates pessimistic (max over particles plus the nominal
mean rollout).  Candidates are ranked by the penalty form
``objective - penalty * max(constraint - budget, 0)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from colorednoise import powerlaw_psd_gaussian

from . import envs
from .envs import EnvSpec
from .gp import GpDynamicsModel

OBJECTIVE_MODES = ("intrinsic", "extrinsic")
CONSTRAINT_MODES = ("pessimistic", "mean-only", "off")


@dataclass(frozen=True)
class PlannerConfig:
    horizon: int = 40
    particles: int = 10
    population: int = 256
    elites: int = 32
    icem_iters: int = 5
    noise_beta: float = 2.0
    init_std: float = 0.5  # fraction of the action range
    momentum: float = 0.1
    penalty: float = 1000.0
    objective_mode: str = "intrinsic"
    constraint_mode: str = "pessimistic"
    objective_agg: str = "max"  # "max" (optimistic) or "mean" over particles
    keep_elites: float = 0.3  # fraction of elites carried to the next iteration
    fallback: str = "zero"  # what to execute when no candidate meets the budget: "zero" | "best"
    particle_scale: float = 1.0  # TS1 draws use std particle_scale * sigma

    def __post_init__(self):
        for name in ("horizon", "particles", "population", "elites", "icem_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.elites > self.population:
            raise ValueError("elites must not exceed population")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.particle_scale < 0:
            raise ValueError("particle_scale must be nonnegative")
        if self.penalty < 0 or self.noise_beta < 0 or self.init_std <= 0:
            raise ValueError("penalty, noise_beta >= 0 and init_std > 0 required")
        if self.objective_mode not in OBJECTIVE_MODES:
            raise ValueError(f"objective_mode must be one of {OBJECTIVE_MODES}")
        if self.constraint_mode not in CONSTRAINT_MODES:
            raise ValueError(f"constraint_mode must be one of {CONSTRAINT_MODES}")
        if self.objective_agg not in ("max", "mean"):
            raise ValueError("objective_agg must be 'max' or 'mean'")
        if self.fallback not in ("zero", "best"):
            raise ValueError("fallback must be 'zero' or 'best'")


@dataclass
class CandidatePlan:
    actions: np.ndarray  # (H, d_a)
    objective_value: float
    constraint_value: float
    score: float
    feasible: bool = True
    mean: np.ndarray | None = None  # final sampling mean, used for warm starts
    history: list = field(default_factory=list)  # best score after each iteration


def intrinsic_reward(model: GpDynamicsModel, z) -> float:
    """Norm of the posterior std vector at ``z``."""
    _, std = model.predict(np.asarray(z, dtype=float).reshape(1, -1))
    return float(math.sqrt(model.d_out) * std[0])


def penalized_score(objective_value, constraint_value, d, penalty):
    violation = np.maximum(np.asarray(constraint_value, dtype=float) - d, 0.0)
    # a disabled constraint reports -inf and contributes nothing
    violation = np.where(np.isfinite(violation), violation, 0.0)
    out = np.asarray(objective_value, dtype=float) - penalty * violation
    return float(out) if out.ndim == 0 else out


def rollout_values(model: GpDynamicsModel, spec: EnvSpec, x0, actions, eps):
    """Propagate particles through the model with explicit standard-normal noise.

    ``x0``: encoded start state ``(d_m,)``; ``actions``: ``(N, H, d_a)``;
    ``eps``: ``(N, P, H, d_m)``.  Particle ``p`` follows
    ``x_{t+1} = mu(x_t, a_t) + sigma(x_t, a_t) * eps[:, p, t]``; pass zeros
    to get the mean rollout.

    Returns per-particle ``(intrinsic, extrinsic, cost)`` sums, each
    ``(N, P)``.  Intrinsic and extrinsic terms are evaluated at
    ``(x_t, a_t)`` for t < H; the cost is summed over the reached states
    ``x_1 .. x_H`` (the start state's cost does not depend on the plan).
    """
    actions = np.asarray(actions, dtype=float)
    N, H, d_a = actions.shape
    P = eps.shape[1]
    d_m = model.d_out
    x = np.broadcast_to(np.asarray(x0, dtype=float), (N * P, d_m)).copy()
    intr = np.zeros(N * P)
    extr = np.zeros(N * P)
    cst = np.zeros(N * P)
    scale = math.sqrt(d_m)
    with np.errstate(invalid="ignore", over="ignore"):
        for t in range(H):
            a = np.repeat(actions[:, t, :], P, axis=0)
            bad = ~np.all(np.isfinite(x), axis=1)
            x[bad] = 0.0  # keep the kernel well defined; flagged below
            mean, std = model.predict(np.concatenate([x, a], axis=1))
            intr += scale * std
            extr += envs.reward_encoded(spec, x, a)
            x = mean + std[:, None] * eps[:, :, t, :].reshape(N * P, d_m)
            x[bad] = np.nan
            cst += envs.cost_encoded(spec, x, a)
    shape = (N, P)
    return intr.reshape(shape), extr.reshape(shape), cst.reshape(shape)


def evaluate_batch(model, spec, x0, actions, eps, objective_mode, constraint_mode, objective_agg="max"):
    """Objective and constraint estimates for a batch of action sequences.

    ``eps`` has shape ``(N, P, H, d_m)``.  The nominal (zero-noise) rollout
    is always propagated alongside the particles: ``mean-only`` uses it as
    the constraint estimate and ``pessimistic`` includes it in the max, so
    the pessimistic estimate dominates the mean-only one on shared noise.
    """
    N = actions.shape[0]
    eps_all = np.concatenate([eps, np.zeros_like(eps[:, :1])], axis=1)
    intr, extr, cst = rollout_values(model, spec, x0, actions, eps_all)
    per_particle = intr[:, :-1] if objective_mode == "intrinsic" else extr[:, :-1]
    obj = per_particle.max(axis=1) if objective_agg == "max" else per_particle.mean(axis=1)
    if constraint_mode == "pessimistic":
        con = cst.max(axis=1)
    elif constraint_mode == "mean-only":
        con = cst[:, -1].copy()
    else:
        con = np.full(N, -np.inf)
    finite = np.all(np.isfinite(np.concatenate([intr, extr, cst], axis=1)), axis=1)
    obj = np.where(finite, obj, -np.inf)
    con = np.where(finite | (constraint_mode == "off"), con, np.inf)
    return obj, con


def evaluate_candidate(model, spec, s0, actions, P, rng, objective_mode="intrinsic",
                       constraint_mode="pessimistic", objective_agg="max"):
    """Estimates for one action sequence ``(H, d_a)`` from physical state ``s0``."""
    rng = np.random.default_rng(rng)
    actions = np.asarray(actions, dtype=float)[None]
    eps = rng.standard_normal((1, P, actions.shape[1], model.d_out))
    obj, con = evaluate_batch(model, spec, spec.encode(s0), actions, eps,
                              objective_mode, constraint_mode, objective_agg)
    return float(obj[0]), float(con[0])


def colored_noise(beta: float, shape, rng) -> np.ndarray:
    """Gaussian noise with power spectrum ~ 1/f^beta along the last axis."""
    rng = np.random.default_rng(rng)
    if shape[-1] < 2:  # no spectrum to shape
        return rng.standard_normal(shape)
    return powerlaw_psd_gaussian(beta, shape, random_state=rng)


def shift_mean(mean: np.ndarray, steps: int, fill: np.ndarray) -> np.ndarray:
    """Drop the first ``steps`` actions and pad the tail with ``fill``."""
    steps = min(steps, len(mean))
    return np.concatenate([mean[steps:], np.broadcast_to(fill, (steps, mean.shape[1]))], axis=0)


def plan(model: GpDynamicsModel, spec: EnvSpec, s0, config: PlannerConfig, warm_start=None,
         rng=None, budget: float | None = None) -> CandidatePlan:
    """Optimize an action sequence from physical state ``s0``.

    ``budget`` is the constraint level candidates must respect (defaults to
    the environment threshold).  Elites carried between iterations keep
    their cached scores, so the best score never decreases across
    iterations.  When the constraint is active and no evaluated candidate
    meets the budget, the zero-action plan is returned flagged infeasible
    (``fallback="zero"``) or the best-scoring one is (``fallback="best"``).
    """
    rng = np.random.default_rng(rng)
    s0 = np.asarray(s0, dtype=float)
    if not np.all(np.isfinite(s0)):
        raise envs.InvalidStateError(f"non-finite planning state {s0}")
    d = spec.cost_threshold if budget is None else budget
    H, d_a, d_m = config.horizon, spec.d_a, model.d_out
    lo, hi = spec.low, spec.high
    x0 = spec.encode(s0)
    mean = np.zeros((H, d_a)) if warm_start is None else np.array(warm_start, dtype=float)
    mean = np.clip(mean, lo, hi)
    std = np.broadcast_to(config.init_std * (hi - lo), (H, d_a)).copy()
    n_keep = max(1, int(round(config.keep_elites * config.elites)))

    kept_actions = np.zeros((0, H, d_a))
    kept = np.zeros((0, 3))  # cached (score, objective, constraint)
    best = None
    history = []
    for it in range(config.icem_iters):
        noise = colored_noise(config.noise_beta, (config.population, d_a, H), rng).transpose(0, 2, 1)
        samples = np.clip(mean + std * noise, lo, hi)
        if it == config.icem_iters - 1:
            samples[-1] = mean
        eps = rng.standard_normal((config.population, config.particles, H, d_m))
        obj, con = evaluate_batch(model, spec, x0, samples, config.particle_scale * eps, config.objective_mode,
                                  config.constraint_mode, config.objective_agg)
        score = penalized_score(obj, con, d, config.penalty)
        pool_actions = np.concatenate([samples, kept_actions], axis=0)
        pool = np.concatenate([np.stack([score, obj, con], axis=1), kept], axis=0)
        # NaN-safe descending order; -inf scores sink to the bottom
        order = np.argsort(-np.nan_to_num(pool[:, 0], nan=-np.inf), kind="stable")
        top = order[: config.elites]
        elites = pool_actions[top]
        if best is None or pool[top[0], 0] > best[0][0]:
            best = (pool[top[0]].copy(), pool_actions[top[0]].copy())
        history.append(float(best[0][0]))
        a = config.momentum
        mean = a * mean + (1 - a) * elites.mean(axis=0)
        std = a * std + (1 - a) * elites.std(axis=0)
        kept_actions = pool_actions[top[:n_keep]]
        kept = pool[top[:n_keep]]

    (b_score, b_obj, b_con), b_actions = best
    feasible = np.isfinite(b_obj) and (config.constraint_mode == "off" or b_con <= d + 1e-12)
    if not feasible and (config.fallback == "zero" or not np.isfinite(b_obj)):
        zero = np.clip(np.zeros((H, d_a)), lo, hi)
        return CandidatePlan(zero, float(b_obj), float(b_con), float(b_score), False, mean, history)
    return CandidatePlan(b_actions, float(b_obj), float(b_con), float(b_score), bool(feasible), mean, history)
