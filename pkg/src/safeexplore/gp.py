"""Exact multi-output GP regression for one-step dynamics.

All output dimensions share one kernel and one noise level, so a single
Cholesky factor of ``K + noise_var * I`` serves every output and the
posterior standard deviation is identical across outputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

JITTERS = (0.0, 1e-8, 1e-6, 1e-4)
STD_FLOOR = 1e-9
N_MAX = 4000


class GpFitError(RuntimeError):
    pass


class InvalidInputError(ValueError):
    pass


@dataclass(frozen=True)
class KernelParams:
    kind: str = "se"  # "se" or "matern52"
    lengthscales: tuple = (1.0,)
    signal_std: float = 1.0

    def __post_init__(self):
        if self.kind not in ("se", "matern52"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if any(l <= 0 for l in self.lengthscales):
            raise ValueError("lengthscales must be positive")
        if self.signal_std <= 0:
            raise ValueError("signal_std must be positive")

    @classmethod
    def isotropic(cls, dim: int, lengthscale: float = 1.0, signal_std: float = 1.0, kind: str = "se"):
        return cls(kind, (float(lengthscale),) * dim, float(signal_std))

    def __call__(self, A, B):
        A = np.atleast_2d(A) / np.asarray(self.lengthscales)
        B = np.atleast_2d(B) / np.asarray(self.lengthscales)
        sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
        np.maximum(sq, 0.0, out=sq)
        var = self.signal_std**2
        if self.kind == "se":
            return var * np.exp(-0.5 * sq)
        r = np.sqrt(5.0 * sq)
        return var * (1.0 + r + r * r / 3.0) * np.exp(-r)

    def diag(self, n: int):
        return np.full(n, self.signal_std**2)


@dataclass(frozen=True)
class PosteriorEval:
    mean: np.ndarray
    std: np.ndarray


def _cholesky_with_jitter(K):
    n = K.shape[0]
    for jitter in JITTERS:
        try:
            return np.linalg.cholesky(K + jitter * np.eye(n)), jitter
        except np.linalg.LinAlgError:
            continue
    raise GpFitError(f"Gram matrix not positive definite even with jitter {JITTERS[-1]}")


@dataclass(frozen=True, eq=False)
class GpDynamicsModel:
    """Fitted GP posterior.  Build it with :func:`fit`; never mutate it.

    ``prior_mean="identity"`` uses the first ``d_out`` input coordinates as
    prior mean, so the GP effectively models ``y - z[:d_out]`` (the state
    increment when inputs start with the encoded state).
    """

    kernel: KernelParams
    Z: np.ndarray
    Y: np.ndarray
    noise_var: float
    chol: np.ndarray | None
    chol_inv: np.ndarray | None
    weights: np.ndarray
    beta: float
    delta: float
    prior_mean: str
    jitter: float
    d_in: int
    d_out: int

    @property
    def n(self) -> int:
        return self.Z.shape[0]

    def _prior(self, Z):
        if self.prior_mean == "identity":
            return Z[:, : self.d_out]
        return np.zeros((Z.shape[0], self.d_out))

    def predict(self, Z):
        """Batched posterior: ``Z (B, d_in)`` -> mean ``(B, d_out)``, std ``(B,)``."""
        Z = np.asarray(Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[None, :]
        if Z.shape[1] != self.d_in:
            raise InvalidInputError(f"expected inputs of dimension {self.d_in}, got {Z.shape[1]}")
        if not np.all(np.isfinite(Z)):
            raise InvalidInputError("non-finite query input")
        mean = self._prior(Z)
        var = self.kernel.diag(Z.shape[0])
        if self.n:
            kx = self.kernel(Z, self.Z)
            mean = mean + kx @ self.weights
            v = kx @ self.chol_inv.T
            var = var - np.einsum("ij,ij->i", v, v)
        std = np.sqrt(np.maximum(var, STD_FLOOR**2))
        return mean, std

    def posterior(self, z) -> PosteriorEval:
        mean, std = self.predict(np.asarray(z, dtype=float).reshape(1, -1))
        return PosteriorEval(mean[0], np.full(self.d_out, std[0]))


def fit(kernel: KernelParams, Z, Y, noise_var: float, beta: float = 2.0, delta: float = 0.1,
        prior_mean: str = "zero") -> GpDynamicsModel:
    """Condition the GP on inputs ``Z (n, d_in)`` and targets ``Y (n, d_out)``."""
    Z = np.asarray(Z, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Z.ndim != 2 or Y.ndim != 2 or Z.shape[0] != Y.shape[0]:
        raise ValueError("Z and Y must be 2-D with matching rows")
    if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(Y))):
        raise InvalidInputError("non-finite training data")
    if noise_var <= 0:
        raise ValueError("noise_var must be positive")
    if not 0 < delta <= 1:
        raise ValueError("delta must be in (0, 1]")
    if prior_mean not in ("zero", "identity"):
        raise ValueError(f"unknown prior mean {prior_mean!r}")
    n, d_in = Z.shape
    if len(kernel.lengthscales) != d_in:
        raise ValueError(f"kernel has {len(kernel.lengthscales)} lengthscales for {d_in} inputs")
    if n > N_MAX:
        raise GpFitError(f"{n} training points exceed the exact-GP cap of {N_MAX}")
    d_out = Y.shape[1]
    model = GpDynamicsModel(kernel, Z, Y, float(noise_var), None, None, np.zeros((0, d_out)),
                            float(beta), float(delta), prior_mean, 0.0, d_in, d_out)
    if n == 0:
        return model
    K = kernel(Z, Z) + noise_var * np.eye(n)
    L, jitter = _cholesky_with_jitter(K)
    resid = Y - model._prior(Z)
    weights = cho_solve((L, True), resid)
    L_inv = solve_triangular(L, np.eye(n), lower=True)
    return GpDynamicsModel(kernel, Z, Y, float(noise_var), L, L_inv, weights,
                           float(beta), float(delta), prior_mean, jitter, d_in, d_out)


def prior_model(kernel: KernelParams, d_out: int, noise_var: float, **kw) -> GpDynamicsModel:
    d_in = len(kernel.lengthscales)
    return fit(kernel, np.zeros((0, d_in)), np.zeros((0, d_out)), noise_var, **kw)


def ts1_step(model: GpDynamicsModel, z, rng) -> np.ndarray:
    """One draw from N(mu(z), diag(sigma(z)^2)); ``z`` may be batched ``(B, d_in)``."""
    rng = np.random.default_rng(rng)
    z = np.asarray(z, dtype=float)
    mean, std = model.predict(z)
    draw = mean + std[:, None] * rng.standard_normal(mean.shape)
    return draw[0] if z.ndim == 1 else draw


def calibration_beta(n: int, delta: float, schedule: str = "constant", base: float = 2.0,
                     rkhs_bound: float = 1.0, gamma: Callable[[int], float] | None = None) -> float:
    """Confidence multiplier beta_n(delta).

    ``constant`` returns ``base`` for every n.  ``log`` returns
    ``base * sqrt(1 + log(1 + n))``.  ``theory`` returns
    ``rkhs_bound + sqrt(2 (gamma(n) + log(1/delta)))`` and requires a
    nondecreasing ``gamma`` callable.
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    if not 0 < delta <= 1:
        raise ValueError("delta must be in (0, 1]")
    if schedule == "constant":
        return float(base)
    if schedule == "log":
        return float(base * math.sqrt(1.0 + math.log1p(n)))
    if schedule == "theory":
        if gamma is None:
            raise ValueError("theory schedule needs a gamma callable")
        return float(rkhs_bound + math.sqrt(2.0 * (gamma(n) + math.log(1.0 / delta))))
    raise ValueError(f"unknown beta schedule {schedule!r}")


def information_gain(model: GpDynamicsModel) -> float:
    """0.5 * log det(I + K / noise_var) for the model's training inputs."""
    if model.n == 0:
        return 0.0
    logdet = 2.0 * np.sum(np.log(np.diag(model.chol)))
    return float(max(0.5 * (logdet - model.n * math.log(model.noise_var)), 0.0))


def information_gain_of_inputs(kernel: KernelParams, Z, noise_var: float) -> float:
    Z = np.asarray(Z, dtype=float)
    if len(Z) == 0:
        return 0.0
    L, _ = _cholesky_with_jitter(kernel(Z, Z) + noise_var * np.eye(len(Z)))
    return float(max(np.sum(np.log(np.diag(L))) - 0.5 * len(Z) * math.log(noise_var), 0.0))


# -- sample complexity ---------------------------------------------------------
def complexity_constant(d_s: int, C_max: float, R_max: float, sigma_0: float,
                        reading: str = "unscaled", sigma: float | None = None) -> float:
    """Constant C of the n* bound.

    ``unscaled``: (1 + sqrt(d_s)) * max(C_max, R_max, sigma_0).
    ``noise-scaled``: the same divided by the noise std ``sigma``.
    """
    c = (1.0 + math.sqrt(d_s)) * max(C_max, R_max, sigma_0)
    if reading == "unscaled":
        return c
    if reading == "noise-scaled":
        if not sigma:
            raise ValueError("noise-scaled reading needs sigma > 0")
        return c / sigma
    raise ValueError(f"unknown reading {reading!r}")


class UnboundedNStar(ArithmeticError):
    pass


def n_star_rhs(H: int, T: int, C: float, sigma_0: float, sigma: float, d_s: int, eps: float) -> float:
    return (H + 1) * T**6 * C**4 * (d_s * sigma_0**2 / math.log1p(sigma_0**2 / sigma**2)) / eps**2


def sample_complexity_n_star(H: int, T: int, C_max: float, R_max: float, sigma_0: float,
                             sigma: float, d_s: int, eps: float,
                             beta_schedule: Callable[[int], float],
                             gamma_schedule: Callable[[int], float],
                             reading: str = "unscaled", C: float | None = None,
                             n_limit: int = 10**9) -> int:
    """Smallest n >= 1 with ``n / (gamma(n) beta(n)^4) >= rhs``.

    The left side must be nondecreasing in n for the given schedules (true
    for the usual sublinear gamma and constant or slowly growing beta);
    the search gallops to a satisfying n and then bisects.
    A nonpositive ``gamma(n) * beta(n)^4`` counts as satisfied.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if C is None:
        C = complexity_constant(d_s, C_max, R_max, sigma_0, reading, sigma)
    rhs = n_star_rhs(H, T, C, sigma_0, sigma, d_s, eps)

    def ok(n: int) -> bool:
        denom = gamma_schedule(n) * beta_schedule(n) ** 4
        if denom <= 0:
            return True
        return n / denom >= rhs

    hi = 1
    if ok(hi):
        return hi
    while not ok(hi):
        if hi >= n_limit:
            raise UnboundedNStar(f"no n <= {n_limit} satisfies the bound (rhs={rhs:.3g})")
        hi = min(hi * 2, n_limit)
    lo = hi // 2  # ok(lo) is False
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi
