"""Conditional flow-matching core shared by the video and action models.

Flow time runs from 0 (clean data) to 1 (pure noise) along the straight
interpolation path x_tau = (1 - tau) x0 + tau eps. Training regresses a
velocity field onto the conditional target eps - x0; sampling integrates the
learned field from tau=1 down to tau=0 (or an intermediate stop) with an
explicit Euler scheme on a uniform grid.

All functions accept plain ndarrays or autodiff Tensors; `tau` may be a
scalar or a per-sample array already shaped for broadcasting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, sigmoid_array


class ContractViolation(ValueError):
    """An operation was called outside its admissible-input contract."""


def check_flow_time(tau):
    """Validate flow times lie in [0, 1]; returns the input unchanged."""
    t = np.asarray(tau, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ContractViolation(f"flow time outside [0, 1]: {tau}")
    return tau


def _shapes_of(x):
    return x.shape if isinstance(x, (Tensor, np.ndarray)) else np.asarray(x).shape


def interpolate(x0, eps, tau):
    """Point on the noise-data interpolation path: (1 - tau) x0 + tau eps."""
    if _shapes_of(x0) != _shapes_of(eps):
        raise ContractViolation(f"shape mismatch: {_shapes_of(x0)} vs {_shapes_of(eps)}")
    check_flow_time(tau)
    dtype = x0.data.dtype if isinstance(x0, Tensor) else np.asarray(x0).dtype
    t = np.asarray(tau, dtype=dtype) if dtype.kind == "f" else np.asarray(tau)
    return x0 * (1.0 - t) + eps * t


def conditional_target(x0, eps):
    """Velocity target eps - x0; independent of the flow time."""
    if _shapes_of(x0) != _shapes_of(eps):
        raise ContractViolation(f"shape mismatch: {_shapes_of(x0)} vs {_shapes_of(eps)}")
    return eps - x0


def cfm_loss(v_pred, u_target):
    """Mean squared error over all elements."""
    if _shapes_of(v_pred) != _shapes_of(u_target):
        raise ContractViolation(
            f"shape mismatch: {_shapes_of(v_pred)} vs {_shapes_of(u_target)}")
    diff = v_pred - u_target
    if isinstance(diff, Tensor):
        return diff.pow(2).mean()
    return float(np.mean(diff * diff))


# --------------------------------------------------------------------- times


@dataclass(frozen=True)
class UniformTime:
    def sample(self, rng, size=None):
        return rng.uniform(0.0, 1.0, size=size)


@dataclass(frozen=True)
class LogitNormalTime:
    """tau = sigmoid(mu + sigma z), z standard normal; support (0, 1)."""

    mu: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    def from_normal(self, z):
        t = sigmoid_array(self.mu + self.sigma * np.asarray(z, dtype=np.float64))
        return np.clip(t, 1e-7, 1.0 - 1e-7)

    def sample(self, rng, size=None):
        return self.from_normal(rng.standard_normal(size=size))


@dataclass(frozen=True)
class SqrtShiftedTime:
    """Density proportional to sqrt(tau - floor) on [floor, 1].

    Inverse-CDF sampling: tau = floor + (1 - floor) u^(2/3), u uniform.
    """

    floor: float = 0.001

    def __post_init__(self):
        if not 0.0 <= self.floor < 1.0:
            raise ValueError(f"floor must be in [0, 1), got {self.floor}")

    def from_uniform(self, u):
        return self.floor + (1.0 - self.floor) * np.asarray(u, dtype=np.float64) ** (2.0 / 3.0)

    def sample(self, rng, size=None):
        return self.from_uniform(rng.uniform(0.0, 1.0, size=size))

    def mean(self):
        return self.floor + (1.0 - self.floor) * 0.6


def sample_time(dist, rng):
    """Draw one flow time from a distribution object."""
    return float(dist.sample(rng))


# ---------------------------------------------------------------- integrator


def denoise_tau_grid(tau_start, tau_end, n_steps):
    """Uniform descending tau grid, endpoints clamped into [0, 1]."""
    taus = np.linspace(tau_start, tau_end, n_steps + 1)
    return np.clip(taus, 0.0, 1.0)


def integrate(field, x_start, tau_start, tau_end, n_steps):
    """Explicit Euler integration of `field` from tau_start down to tau_end.

    `field(x, tau) -> velocity` of the same shape as x. tau_start == tau_end
    with n_steps == 0 is the degenerate no-op case.
    """
    check_flow_time(tau_start)
    check_flow_time(tau_end)
    if tau_start < tau_end:
        raise ContractViolation(
            f"integration runs down in flow time: start {tau_start} < end {tau_end}")
    if tau_start == tau_end:
        if n_steps == 0:
            return x_start
    if n_steps < 1:
        raise ContractViolation(f"n_steps must be >= 1, got {n_steps}")
    taus = denoise_tau_grid(tau_start, tau_end, n_steps)
    x = x_start
    for i in range(n_steps):
        dt = float(taus[i + 1] - taus[i])
        x = x + field(x, float(taus[i])) * dt
    return x


def default_video_steps(tau_v, full_steps=10):
    """Step count for a partial denoise from 1 down to tau_v."""
    return int(math.ceil(full_steps * (1.0 - tau_v)))
