"""Two-phase safe exploration loop and its ablation baselines.

Episodes ``1..n_star`` maximize the model's epistemic uncertainty
(intrinsic objective); later episodes maximize the task reward.  The
constraint handling depends on the mode:

============  ===========  ===========================
mode          objective    constraint
============  ===========  ===========================
actsafe       intrinsic    pessimistic (particle max)
no-pessimism  intrinsic    mean-only
opax          intrinsic    off
greedy        extrinsic    pessimistic
uniform       --           uniform random actions
============  ===========  ===========================
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import envs, gp
from .envs import EnvSpec, Trajectory
from .planner import PlannerConfig, plan, shift_mean

logger = logging.getLogger(__name__)

MODES = ("actsafe", "no-pessimism", "opax", "greedy", "uniform")
CONSTRAINT_FOR_MODE = {
    "actsafe": "pessimistic",
    "no-pessimism": "mean-only",
    "opax": "off",
    "greedy": "pessimistic",
    "uniform": "off",
}


@dataclass(frozen=True)
class AgentConfig:
    mode: str = "actsafe"
    n_star: int = 10
    total_episodes: int = 10
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    replan_every: int = 1
    lengthscales: tuple | None = None  # defaults to 1.0 per GP input
    signal_std: float = 1.0
    kernel: str = "se"
    noise_var: float | None = None  # defaults to the environment noise variance
    beta: float = 2.0
    beta_schedule: str = "constant"
    delta: float = 0.1
    prior_mean: str = "identity"
    gp_stride: int = 1
    gp_max_points: int = gp.N_MAX
    exploit_updates: bool = False
    warmup: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0 <= self.n_star <= self.total_episodes:
            raise ValueError("need 0 <= n_star <= total_episodes")
        if self.replan_every < 1 or self.gp_stride < 1:
            raise ValueError("replan_every and gp_stride must be >= 1")

    def planner_for(self, phase: str) -> PlannerConfig:
        objective = "extrinsic" if (phase == "exploitation" or self.mode == "greedy") else "intrinsic"
        constraint = CONSTRAINT_FOR_MODE[self.mode]
        return replace(self.planner, objective_mode=objective, constraint_mode=constraint)


_DESK_PLANNER = dict(horizon=40, particles=10, population=96, elites=10, icem_iters=3,
                     objective_agg="mean", particle_scale=2.0)
DESK_PROFILES = {
    "pendulum": dict(signal_std=0.3, lengthscales=(1.0, 1.0, 1.0, 3.0), gp_stride=8, replan_every=10),
    "cartpole": dict(signal_std=0.1, lengthscales=(3.0, 3.0, 1.0, 1.0, 3.0, 10.0), gp_stride=8, replan_every=10),
}
# a moving cart keeps moving under zero force, so the least-violating plan is the safer backup
_DESK_PLANNER_ENV = {"pendulum": {}, "cartpole": dict(fallback="best")}


def desk_profile(env: str, **planner_overrides) -> dict:
    """AgentConfig keyword arguments sized to run an episode in seconds on one core.

    Compared with the full-scale defaults, the planner uses a smaller
    population, fewer iCEM iterations, replans every 10 steps and spreads
    TS1 particles over the beta-scaled confidence band; the GP is fit on
    every 8th transition.  On Cartpole an infeasible plan falls back to the
    least-violating candidate rather than to zero force.
    """
    kw = dict(DESK_PROFILES[env])
    kw["planner"] = PlannerConfig(**{**_DESK_PLANNER, **_DESK_PLANNER_ENV[env], **planner_overrides})
    return kw


@dataclass
class EpisodeRecord:
    episode: int
    phase: str
    trajectory: Trajectory
    J_r: float
    J_c: float
    cumulative_cost: float
    objective_mode: str
    constraint_mode: str
    mean_objective: float
    infeasible_plans: int
    planner_calls: int
    wall_time: float
    error: str | None = None


# -- dataset / model -------------------------------------------------------------
class Dataset:
    """Transitions in the model's encoded coordinates."""

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self.Z = np.zeros((0, spec.d_model + spec.d_a))
        self.Y = np.zeros((0, spec.d_model))
        self._episode_lengths: list[int] = []

    def __len__(self):
        return len(self.Z)

    def add(self, traj: Trajectory):
        s, a, s_next = traj.transitions()
        z = np.concatenate([self.spec.encode(s), a], axis=1)
        self.Z = np.concatenate([self.Z, z], axis=0)
        self.Y = np.concatenate([self.Y, self.spec.encode(s_next)], axis=0)
        self._episode_lengths.append(len(a))

    def training_subset(self, stride: int = 1, max_points: int = gp.N_MAX):
        """Every ``stride``-th transition of each episode, newest kept if over ``max_points``."""
        idx = []
        start = 0
        for n in self._episode_lengths:
            idx.extend(range(start, start + n, stride))
            start += n
        idx = np.asarray(idx[-max_points:] if max_points else [], dtype=int)
        return self.Z[idx], self.Y[idx]


def kernel_for(spec: EnvSpec, config: AgentConfig) -> gp.KernelParams:
    d_in = spec.d_model + spec.d_a
    ls = config.lengthscales if config.lengthscales is not None else (1.0,) * d_in
    if len(ls) != d_in:
        raise ValueError(f"{spec.name} needs {d_in} lengthscales, got {len(ls)}")
    return gp.KernelParams(config.kernel, tuple(float(l) for l in ls), float(config.signal_std))


def fit_model(spec: EnvSpec, config: AgentConfig, data: Dataset, episode: int = 0) -> gp.GpDynamicsModel:
    Z, Y = data.training_subset(config.gp_stride, config.gp_max_points)
    noise_var = config.noise_var if config.noise_var is not None else max(spec.noise_std**2, 1e-6)
    kernel = kernel_for(spec, config)
    gamma = None
    if config.beta_schedule == "theory":
        gamma = lambda n: gp.information_gain_of_inputs(kernel, Z, noise_var)  # noqa: E731
    beta = gp.calibration_beta(episode, config.delta, config.beta_schedule, config.beta, gamma=gamma)
    return gp.fit(kernel, Z, Y, noise_var, beta=beta, delta=config.delta, prior_mean=config.prior_mean)


class OracleModel:
    """Stand-in model that returns the true noise-free dynamics with (numerically) zero std."""

    def __init__(self, spec: EnvSpec, std: float = gp.STD_FLOOR):
        self.spec = spec
        self.d_out = spec.d_model
        self.d_in = spec.d_model + spec.d_a
        self.std = std

    def predict(self, Z):
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        x, a = Z[:, : self.d_out], Z[:, self.d_out :]
        nxt = envs.dynamics(self.spec, self.spec.decode(x), a)
        return self.spec.encode(nxt), np.full(len(Z), self.std)


# -- episodes ---------------------------------------------------------------------
class MpcPolicy:
    """Receding-horizon controller: replans every ``replan_every`` steps."""

    def __init__(self, model, spec, planner_cfg: PlannerConfig, replan_every: int, rng):
        self.model = model
        self.spec = spec
        self.cfg = planner_cfg
        self.replan_every = replan_every
        self.rng = rng
        self.queue: list[np.ndarray] = []
        self.warm = None
        self.spent = 0.0
        self.objectives: list[float] = []
        self.infeasible = 0
        self.calls = 0

    def __call__(self, s):
        if not self.queue:
            budget = max(self.spec.cost_threshold - self.spent, 0.0)
            p = plan(self.model, self.spec, s, self.cfg, self.warm, self.rng, budget=budget)
            self.calls += 1
            self.objectives.append(p.objective_value)
            if not p.feasible:
                self.infeasible += 1
            k = min(self.replan_every, len(p.actions))
            self.queue = list(p.actions[:k])
            self.warm = shift_mean(p.mean, k, np.zeros(self.spec.d_a))
        a = self.queue.pop(0)
        self.spent += float(envs.cost(self.spec, s))
        return a


class UniformPolicy:
    def __init__(self, spec, rng):
        self.spec = spec
        self.rng = rng

    def __call__(self, s):
        return self.rng.uniform(self.spec.low, self.spec.high)


def run_episode(model, spec: EnvSpec, config: AgentConfig, phase: str, rng, episode: int = 0,
                cumulative_cost: float = 0.0) -> tuple[Trajectory, EpisodeRecord]:
    """One episode on the true system.

    ``rng`` is a seed or generator used to derive independent streams for
    process noise and planning.
    """
    env_rng, plan_rng = np.random.default_rng(rng).spawn(2)
    t0 = time.perf_counter()
    if phase == "warmup":
        bound = 0.1 * np.maximum(np.abs(spec.low), np.abs(spec.high))
        policy = _small_amplitude(spec, plan_rng, bound)
        objective_mode, constraint_mode = "none", "off"
    elif config.mode == "uniform":
        policy = UniformPolicy(spec, plan_rng)
        objective_mode, constraint_mode = "none", "off"
    else:
        cfg = config.planner_for(phase)
        policy = MpcPolicy(model, spec, cfg, config.replan_every, plan_rng)
        objective_mode, constraint_mode = cfg.objective_mode, cfg.constraint_mode
    error = None
    try:
        traj = envs.rollout_true(spec, policy, rng=env_rng)
    except envs.RolloutError as exc:
        traj, error = exc.partial, str(exc)
    is_mpc = isinstance(policy, MpcPolicy)
    record = EpisodeRecord(
        episode=episode,
        phase=phase,
        trajectory=traj,
        J_r=traj.J_r,
        J_c=traj.J_c,
        cumulative_cost=cumulative_cost + traj.J_c,
        objective_mode=objective_mode,
        constraint_mode=constraint_mode,
        mean_objective=float(np.mean(policy.objectives)) if is_mpc and policy.objectives else float("nan"),
        infeasible_plans=policy.infeasible if is_mpc else 0,
        planner_calls=policy.calls if is_mpc else 0,
        wall_time=time.perf_counter() - t0,
        error=error,
    )
    return traj, record


def _small_amplitude(spec, rng, bound):
    def policy(s):
        return rng.uniform(-bound, bound)
    return policy


EpisodeHook = Callable[[gp.GpDynamicsModel, EpisodeRecord], None]


def run_agent(spec: EnvSpec, config: AgentConfig, seed: int, on_episode: EpisodeHook | None = None,
              return_model: bool = False):
    """Full learning loop; returns the episode records (and the final model if asked).

    Costs of the optional warm-up episode are kept out of the cumulative
    cost; its data seeds the model.
    """
    data = Dataset(spec)
    model = fit_model(spec, config, data, 0)
    records: list[EpisodeRecord] = []
    cumulative = 0.0
    if config.warmup:
        _, rec = run_episode(model, spec, config, "warmup", _seed_rng(seed, 0), episode=0)
        data.add(rec.trajectory)
        model = fit_model(spec, config, data, 0)
    for n in range(1, config.total_episodes + 1):
        phase = "expansion" if n <= config.n_star else "exploitation"
        if config.mode == "greedy":
            phase = "exploitation"
        traj, rec = run_episode(model, spec, config, phase, _seed_rng(seed, n), episode=n,
                                cumulative_cost=cumulative)
        cumulative = rec.cumulative_cost
        records.append(rec)
        if rec.error is not None:
            logger.error("episode %d aborted: %s", n, rec.error)
            break
        if phase == "expansion" or config.exploit_updates or config.mode == "greedy":
            data.add(traj)
            model = fit_model(spec, config, data, n)
        if on_episode is not None:
            on_episode(model, rec)
    return (records, model) if return_model else records


def _seed_rng(seed, episode):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(episode)]))


@dataclass
class EvalSummary:
    mean_J_r: float
    se_J_r: float
    mean_J_c: float
    se_J_c: float
    J_r: list
    J_c: list


def _se(x):
    x = np.asarray(x, dtype=float)
    return float(x.std(ddof=1) / np.sqrt(len(x))) if len(x) > 1 else 0.0


def zero_shot_eval(model, spec: EnvSpec, planner_config: PlannerConfig, episodes: int, seed: int,
                   replan_every: int = 1) -> EvalSummary | None:
    """Plan for the task reward on a fixed model (no updates); ``None`` for zero episodes."""
    if episodes <= 0:
        return None
    cfg = replace(planner_config, objective_mode="extrinsic", constraint_mode="pessimistic")
    J_r, J_c = [], []
    for k in range(episodes):
        env_rng, plan_rng = _seed_rng(seed, 10_000 + k).spawn(2)
        policy = MpcPolicy(model, spec, cfg, replan_every, plan_rng)
        traj = envs.rollout_true(spec, policy, rng=env_rng)
        J_r.append(traj.J_r)
        J_c.append(traj.J_c)
    return EvalSummary(float(np.mean(J_r)), _se(J_r), float(np.mean(J_c)), _se(J_c), J_r, J_c)
