"""Brownian-bridge diffusion between a stain image x0 (t = 0) and the encoded
polarization image ybar0 (t = T).

The forward marginal is

    x_t = (1 - t/T) x0 + (t/T) ybar0 + sqrt(delta_t) eps,   delta_t = 2 t (T - t) / T^2

which is a Brownian bridge with diffusion scale 2/T, so two states s < t
have covariance 2 s (T - t) / T^2. The reverse sampler draws from the exact
Gaussian conditional of x_s given x_t and both endpoints, with x0 replaced by
the network estimate x_t - eps_pred.

All functions accept numpy arrays; ``forward_sample`` and ``estimate_x0``
also accept :class:`rbdm.tensor.Tensor` operands so they can sit inside a
differentiable loss.
"""
import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from rbdm.errors import ConfigError, NumericsWarning, ShapeError
from rbdm.tensor import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    m: np.ndarray
    delta: np.ndarray

    def cross_cov(self, s, t):
        """Cov(x_s, x_t) for s <= t."""
        return 2.0 * s * (self.T - t) / self.T ** 2


def make_schedule(T):
    """Precompute m_t = t/T and delta_t = 2t(T-t)/T^2 for t = 0..T."""
    if int(T) != T or T < 2:
        raise ConfigError(f"schedule needs an integer T >= 2, got {T}")
    T = int(T)
    t = np.arange(T + 1, dtype=np.float64)
    m = t / T
    delta = 2.0 * t * (T - t) / T ** 2
    m.setflags(write=False)
    delta.setflags(write=False)
    return NoiseSchedule(T=T, m=m, delta=delta)


@dataclass
class ForwardSample:
    x_t: object
    target: object
    epsilon: np.ndarray
    t: int


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _check_pair(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"{what}: shapes differ ({tuple(a.shape)} vs {tuple(b.shape)})")


def forward_sample(x0, ybar0, t, schedule, rng=None, epsilon=None):
    """Draw x_t from the bridge marginal and build the regression target
    m_t (ybar0 - x0) + sqrt(delta_t) eps that the denoiser must predict."""
    _check_pair(x0, ybar0, "forward_sample")
    if not 0 <= t <= schedule.T:
        raise ConfigError(f"forward_sample: t={t} outside [0, {schedule.T}]")
    for name, v in (("x0", x0), ("ybar0", ybar0)):
        d = _data(v)
        if d.size and (d.min() < -1 or d.max() > 1):
            raise ConfigError(f"forward_sample: {name} leaves [-1, 1]")
    if epsilon is None:
        dtype = _data(x0).dtype
        dtype = dtype if np.issubdtype(dtype, np.floating) else np.float64
        epsilon = rng.standard_normal(tuple(x0.shape), dtype=dtype)
    m_t = float(schedule.m[t])
    sd = float(np.sqrt(schedule.delta[t]))
    x_t = (1.0 - m_t) * x0 + m_t * ybar0 + sd * epsilon
    target = m_t * (ybar0 - x0) + sd * epsilon
    return ForwardSample(x_t=x_t, target=target, epsilon=epsilon, t=t)


def estimate_x0(x_t, eps_pred):
    """x0 estimate x_t - eps_pred (no clamping)."""
    _check_pair(x_t, eps_pred, "estimate_x0")
    return x_t - eps_pred


def posterior_coefficients(t, s, schedule):
    """(ratio, variance) of q(x_s | x_t, x0, ybar0).

    mean = bridge_mean(s) + ratio * (x_t - bridge_mean(t)).
    """
    T = schedule.T
    if not 0 <= s < t <= T:
        raise ConfigError(f"posterior step needs 0 <= s < t <= T, got s={s}, t={t}, T={T}")
    if s == 0:
        return 0.0, 0.0
    d_s = float(schedule.delta[s])
    if t == T:
        # delta_T = 0: use the limit of c/delta_t
        return s / T, d_s
    c = schedule.cross_cov(s, t)
    d_t = float(schedule.delta[t])
    var = d_s - c * c / d_t
    if var < 0:
        warnings.warn(f"negative posterior variance {var:.3e} at t={t}, s={s}; clamped to 0",
                      NumericsWarning)
        var = 0.0
    return c / d_t, var


def posterior_step(x_t, x0_hat, ybar0, t, s, schedule, rng):
    """Sample x_s from the Gaussian bridge posterior given x_t and the x0 estimate."""
    _check_pair(x_t, x0_hat, "posterior_step")
    _check_pair(x_t, ybar0, "posterior_step")
    ratio, var = posterior_coefficients(t, s, schedule)
    if s == 0:
        return np.array(x0_hat, copy=True)
    m_s, m_t = float(schedule.m[s]), float(schedule.m[t])
    mean = (1.0 - m_s) * x0_hat + m_s * ybar0 + ratio * (x_t - ((1.0 - m_t) * x0_hat + m_t * ybar0))
    if var == 0.0:
        return mean
    noise = rng.standard_normal(np.shape(x_t), dtype=np.asarray(x_t).dtype)
    return mean + np.sqrt(var) * noise


def sampling_steps(T, n_steps):
    """Descending visit list T = t_0 > ... > t_n = 0 with equal stride."""
    if n_steps < 1 or T % n_steps:
        raise ConfigError(f"{n_steps} sampling steps do not divide T={T}")
    stride = T // n_steps
    return list(range(T, -1, -stride))


@dataclass
class SampleResult:
    image: np.ndarray
    trajectory: Optional[List[np.ndarray]] = None
    x0_estimates: Optional[List[np.ndarray]] = field(default=None)


def sample(model, y0, n_steps, schedule, rng, record_trajectory=False):
    """Translate a Mueller patch (or batch) into a stain image.

    ``model`` provides ``T``, ``encode(y0)`` and ``predict_eps(x_t, ybar0, t)``
    on numpy arrays. Starts from x_T = ybar0 and walks the skip-step list,
    clamping only the final output to [-1, 1].
    """
    if model.T != schedule.T:
        raise ConfigError(f"model was built for T={model.T}, schedule has T={schedule.T}")
    steps = sampling_steps(schedule.T, n_steps)
    ybar0 = model.encode(y0)
    x = ybar0
    traj = [x.copy()] if record_trajectory else None
    est = [] if record_trajectory else None
    for t, s in zip(steps[:-1], steps[1:]):
        eps = model.predict_eps(x, ybar0, t)
        x0_hat = estimate_x0(x, eps)
        x = posterior_step(x, x0_hat, ybar0, t, s, schedule, rng)
        if record_trajectory:
            traj.append(x.copy())
            est.append(x0_hat.copy())
    return SampleResult(image=np.clip(x, -1.0, 1.0), trajectory=traj, x0_estimates=est)
