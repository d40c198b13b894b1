"""Ground-truth Pendulum and Cartpole systems with swing-up rewards and safety costs.

States are stored in physical coordinates (angles as radians, unwrapped).
The learned model works on an encoded representation where every angle is
replaced by its (cos, sin) pair; :meth:`EnvSpec.encode` and
:meth:`EnvSpec.decode` convert between the two.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

logger = logging.getLogger(__name__)

Policy = Callable[[np.ndarray], np.ndarray]


class InvalidStateError(ValueError):
    pass


class RolloutError(RuntimeError):
    """Raised when a rollout hits a non-finite state; carries the partial trajectory."""

    def __init__(self, message: str, partial: "Trajectory"):
        super().__init__(message)
        self.partial = partial


def wrap_angle(theta):
    """Map angles to [-pi, pi)."""
    return (np.asarray(theta) + np.pi) % (2.0 * np.pi) - np.pi


@dataclass(frozen=True)
class EnvSpec:
    name: str
    d_s: int
    d_a: int
    horizon: int
    noise_std: float
    cost_threshold: float
    action_low: tuple
    action_high: tuple
    dt: float
    # index of the angle coordinate in the physical state
    angle_index: int
    # per-coordinate clip bounds applied after every step (None = unbounded)
    state_low: tuple
    state_high: tuple
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if self.cost_threshold < 0:
            raise ValueError("cost_threshold must be nonnegative")
        if len(self.action_low) != self.d_a or len(self.action_high) != self.d_a:
            raise ValueError("action bounds must have d_a entries")
        if any(lo >= hi for lo, hi in zip(self.action_low, self.action_high)):
            raise ValueError("action bounds need low < high")

    @property
    def d_model(self) -> int:
        """Dimension of the encoded state (one angle becomes cos/sin)."""
        return self.d_s + 1

    @property
    def low(self) -> np.ndarray:
        return np.asarray(self.action_low, dtype=float)

    @property
    def high(self) -> np.ndarray:
        return np.asarray(self.action_high, dtype=float)

    @property
    def initial_state(self) -> np.ndarray:
        return np.asarray(self.params["s0"], dtype=float)

    def with_overrides(self, **kwargs) -> "EnvSpec":
        params = dict(self.params)
        top = {}
        for k, v in kwargs.items():
            if k in params:
                params[k] = v
            else:
                top[k] = v
        return replace(self, params=params, **top)

    # -- representation ---------------------------------------------------
    def encode(self, s):
        """Physical state(s) ``(..., d_s)`` -> encoded ``(..., d_s + 1)``."""
        s = np.asarray(s, dtype=float)
        i = self.angle_index
        th = s[..., i : i + 1]
        return np.concatenate([s[..., :i], np.cos(th), np.sin(th), s[..., i + 1 :]], axis=-1)

    def decode(self, x):
        """Encoded state(s) -> physical, angle recovered with atan2 (wrapped)."""
        x = np.asarray(x, dtype=float)
        i = self.angle_index
        th = np.arctan2(x[..., i + 1], x[..., i])[..., None]
        return np.concatenate([x[..., :i], th, x[..., i + 2 :]], axis=-1)

    def clip_action(self, a):
        return np.clip(a, self.low, self.high)

    @property
    def max_cost(self) -> float:
        """Largest per-step cost reachable inside the state bounds."""
        return _COST_BOUNDS[self.name](self)


# -- physics ------------------------------------------------------------------
def _pendulum_deriv(p, th, om, u):
    g, m, l, b = p["gravity"], p["mass"], p["length"], p["damping"]
    # theta = 0 is upright, theta = pi hangs down
    return g / l * np.sin(th) + u / (m * l * l) - b * om


def _pendulum_f(spec: EnvSpec, s, a):
    p = spec.params
    th, om = s[..., 0], s[..., 1]
    u = a[..., 0]
    h = spec.dt / p["substeps"]
    # Stormer-Verlet substeps; damping enters the half-kicks explicitly
    for _ in range(p["substeps"]):
        om = om + 0.5 * h * _pendulum_deriv(p, th, om, u)
        th = th + h * om
        om = om + 0.5 * h * _pendulum_deriv(p, th, om, u)
    return np.stack([th, om], axis=-1)


def _cartpole_acc(p, th, om, f):
    g, mc, mp, l = p["gravity"], p["cart_mass"], p["pole_mass"], p["pole_length"]
    total = mc + mp
    sin, cos = np.sin(th), np.cos(th)
    temp = (f + mp * l * om * om * sin) / total
    th_acc = (g * sin - cos * temp) / (l * (4.0 / 3.0 - mp * cos * cos / total))
    x_acc = temp - mp * l * th_acc * cos / total
    return x_acc, th_acc


def _cartpole_f(spec: EnvSpec, s, a):
    p = spec.params
    x, v, th, om = s[..., 0], s[..., 1], s[..., 2], s[..., 3]
    f = a[..., 0]
    h = spec.dt / p["substeps"]
    for _ in range(p["substeps"]):
        x_acc, th_acc = _cartpole_acc(p, th, om, f)
        v = v + h * x_acc
        om = om + h * th_acc
        x = x + h * v
        th = th + h * om
    return np.stack([x, v, th, om], axis=-1)


_DYNAMICS = {"pendulum": _pendulum_f, "cartpole": _cartpole_f}


def pendulum_spec(**overrides) -> EnvSpec:
    spec = EnvSpec(
        name="pendulum",
        d_s=2,
        d_a=1,
        horizon=200,
        noise_std=0.01,
        cost_threshold=0.0,
        action_low=(-2.0,),
        action_high=(2.0,),
        dt=0.05,
        angle_index=0,
        state_low=(None, -8.0),
        state_high=(None, 8.0),
        params=dict(
            mass=1.0, length=1.0, gravity=9.81, damping=0.0, substeps=8,
            speed_limit=6.0, s0=(np.pi, 0.0),
        ),
    )
    return spec.with_overrides(**overrides) if overrides else spec


def cartpole_spec(**overrides) -> EnvSpec:
    spec = EnvSpec(
        name="cartpole",
        d_s=4,
        d_a=1,
        horizon=200,
        noise_std=0.01,
        cost_threshold=0.75,
        action_low=(-10.0,),
        action_high=(10.0,),
        dt=0.02,
        angle_index=2,
        state_low=(-3.0, None, None, None),
        state_high=(3.0, None, None, None),
        params=dict(
            cart_mass=1.0, pole_mass=0.1, pole_length=0.5, gravity=9.81, substeps=1,
            position_limit=0.5, s0=(0.0, 0.0, np.pi, 0.0),
        ),
    )
    return spec.with_overrides(**overrides) if overrides else spec


ENVS = {"pendulum": pendulum_spec, "cartpole": cartpole_spec}


def make_env(name: str, **overrides) -> EnvSpec:
    try:
        return ENVS[name](**overrides)
    except KeyError:
        raise ValueError(f"unknown environment {name!r}") from None


def _clip_state(spec: EnvSpec, s):
    lo = np.array([-np.inf if b is None else b for b in spec.state_low])
    hi = np.array([np.inf if b is None else b for b in spec.state_high])
    return np.clip(s, lo, hi)


def dynamics(spec: EnvSpec, s, a):
    """Noise-free transition f*(s, a); broadcasts over leading axes."""
    s = np.asarray(s, dtype=float)
    a = np.asarray(a, dtype=float)
    return _clip_state(spec, _DYNAMICS[spec.name](spec, s, a))


def true_step(spec: EnvSpec, s, a, noise) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if not np.all(np.isfinite(s)):
        raise InvalidStateError(f"non-finite state {s}")
    if noise.shape[-1] != spec.d_s:
        raise ValueError(f"noise must have dimension {spec.d_s}")
    nxt = _DYNAMICS[spec.name](spec, s, np.asarray(a, dtype=float)) + noise
    return _clip_state(spec, nxt)


# -- rewards and costs -------------------------------------------------------
def reward(spec: EnvSpec, s, a):
    """Swing-up reward; broadcasts over leading axes of physical states."""
    s = np.asarray(s, dtype=float)
    u = np.asarray(a, dtype=float)[..., 0]
    if spec.name == "pendulum":
        dth = wrap_angle(s[..., 0])
        om = s[..., 1]
        return -(dth**2 + 0.1 * om**2 + 0.02 * u**2)
    p, v, th, om = s[..., 0], s[..., 1], s[..., 2], s[..., 3]
    dth = wrap_angle(th)
    return -(dth**2 + p**2 + 0.1 * (v**2 + om**2)) - 0.01 * u**2


def cost(spec: EnvSpec, s, a=None):
    s = np.asarray(s, dtype=float)
    if spec.name == "pendulum":
        return np.maximum(np.abs(s[..., 1]) - spec.params["speed_limit"], 0.0)
    return np.maximum(np.abs(s[..., 0]) - spec.params["position_limit"], 0.0)


def reward_encoded(spec: EnvSpec, x, a):
    return reward(spec, spec.decode(x), a)


def cost_encoded(spec: EnvSpec, x, a=None):
    # cost never depends on the angle, so read the coordinate straight from x
    if spec.name == "pendulum":
        return np.maximum(np.abs(x[..., 2]) - spec.params["speed_limit"], 0.0)
    return np.maximum(np.abs(x[..., 0]) - spec.params["position_limit"], 0.0)


_COST_BOUNDS = {
    "pendulum": lambda sp: max(sp.state_high[1] - sp.params["speed_limit"], 0.0),
    "cartpole": lambda sp: max(sp.state_high[0] - sp.params["position_limit"], 0.0),
}


# -- rollouts ---------------------------------------------------------------
@dataclass
class Trajectory:
    states: np.ndarray  # (T+1, d_s)
    actions: np.ndarray  # (T, d_a)
    rewards: np.ndarray  # (T,)
    costs: np.ndarray  # (T,)
    clipped_actions: int = 0

    @property
    def J_r(self) -> float:
        return float(np.sum(self.rewards))

    @property
    def J_c(self) -> float:
        return float(np.sum(self.costs))

    def __len__(self):
        return len(self.actions)

    def transitions(self):
        """(states, actions, next_states) arrays for model fitting."""
        return self.states[:-1], self.actions, self.states[1:]


def rollout_true(spec: EnvSpec, policy: Policy, s0=None, rng=None, horizon=None) -> Trajectory:
    """Run ``policy`` on the true system for ``horizon`` steps (defaults to spec.horizon).

    ``rng`` is a seed or a ``numpy.random.Generator``; per-step noise is
    N(0, noise_std^2 I).  Policies that return out-of-bounds actions get
    clipped and the event is counted on the trajectory.
    """
    rng = np.random.default_rng(rng)
    T = spec.horizon if horizon is None else horizon
    s = spec.initial_state if s0 is None else np.asarray(s0, dtype=float)
    states = np.empty((T + 1, spec.d_s))
    actions = np.empty((T, spec.d_a))
    rewards = np.empty(T)
    costs = np.empty(T)
    states[0] = s
    clipped = 0
    for t in range(T):
        a = np.asarray(policy(states[t]), dtype=float).reshape(spec.d_a)
        a_c = spec.clip_action(a)
        if not np.array_equal(a_c, a):
            clipped += 1
        actions[t] = a_c
        rewards[t] = reward(spec, states[t], a_c)
        costs[t] = cost(spec, states[t], a_c)
        w = rng.normal(0.0, spec.noise_std, size=spec.d_s)
        try:
            states[t + 1] = true_step(spec, states[t], a_c, w)
        except InvalidStateError as exc:
            partial = Trajectory(states[: t + 1], actions[:t], rewards[:t], costs[:t], clipped)
            raise RolloutError(str(exc), partial) from exc
        if not np.all(np.isfinite(states[t + 1])):
            partial = Trajectory(states[: t + 2], actions[: t + 1], rewards[: t + 1], costs[: t + 1], clipped)
            raise RolloutError(f"non-finite state at step {t + 1}", partial)
    if clipped:
        logger.warning("%d out-of-bounds actions clipped during rollout", clipped)
    return Trajectory(states, actions, rewards, costs, clipped)
