"""Noise schedules and closed-form Gaussian diffusion quantities.

All schedule arrays are float64 numpy arrays indexed by timestep, with index 0
holding the clean-data boundary (``alpha_bar[0] == 1``).  Per-step arrays
(``beta``, ``alpha``, posterior coefficients) also have length ``T + 1`` and
leave index 0 unused so that ``arr[t]`` always means "step t".
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np
import torch

BETA_MIN = 1e-8
BETA_MAX = 0.999


class ConfigError(ValueError):
    """Raised for invalid configuration values."""


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray
    post_coef_x0: np.ndarray
    post_coef_xt: np.ndarray

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        """Build every derived coefficient from ``betas[1..T]``."""
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ConfigError("betas must be a non-empty 1-D array")
        if np.any(betas < 0) or np.any(betas >= 1):
            raise ConfigError("betas must lie in [0, 1)")
        T = betas.size
        beta = np.concatenate([[0.0], betas])
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        alpha_bar[0] = 1.0
        prev = alpha_bar[:-1]
        cur = alpha_bar[1:]
        one_minus = 1.0 - cur
        with np.errstate(divide="ignore", invalid="ignore"):
            post_var = np.where(one_minus > 0, (1.0 - prev) / one_minus * betas, 0.0)
            coef_x0 = np.where(one_minus > 0, np.sqrt(prev) * betas / one_minus, 0.0)
            coef_xt = np.where(
                one_minus > 0, np.sqrt(alpha[1:]) * (1.0 - prev) / one_minus, 1.0
            )
        pad = np.array([np.nan])
        arrays = dict(
            beta=beta,
            alpha=alpha,
            alpha_bar=alpha_bar,
            posterior_var=np.concatenate([pad, post_var]),
            post_coef_x0=np.concatenate([pad, coef_x0]),
            post_coef_xt=np.concatenate([pad, coef_xt]),
        )
        for arr in arrays.values():
            arr.flags.writeable = False
        return cls(T=T, **arrays)

    def check_t(self, t) -> None:
        t_arr = np.asarray(t.cpu() if torch.is_tensor(t) else t)
        if t_arr.size and (t_arr.min() < 1 or t_arr.max() > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]: {t}")

    def coef(self, name: str, t, like=None):
        """Look up ``name`` at ``t`` and shape it to broadcast against ``like``.

        ``t`` is a python int or a 1-D array/tensor with one step per leading
        batch element of ``like``.
        """
        arr = getattr(self, name)
        if torch.is_tensor(t):
            t = t.detach().cpu().numpy()
        vals = arr[np.asarray(t, dtype=np.int64)]
        if like is None:
            return vals
        if np.ndim(vals) == 1:
            vals = vals.reshape((-1,) + (1,) * (like.ndim - 1))
        if torch.is_tensor(like):
            return torch.as_tensor(vals, dtype=like.dtype, device=like.device)
        return np.asarray(vals, dtype=np.result_type(like, np.float64))

    def to_rows(self):
        """Yield ``(t, beta_t, alpha_bar_t, posterior_var_t)`` for t = 1..T."""
        for t in range(1, self.T + 1):
            yield t, self.beta[t], self.alpha_bar[t], self.posterior_var[t]


def build_sqrt_schedule(T: int, s: float = 1e-4) -> NoiseSchedule:
    """Schedule with ``alpha_bar(t) = 1 - sqrt(t/T + s)``.

    The closed form goes negative near ``t = T``; it is floored at zero and
    the resulting betas are clipped to ``(BETA_MIN, BETA_MAX)`` before the
    cumulative product is recomputed, so every type invariant holds exactly.
    """
    if not isinstance(T, (int, np.integer)) or isinstance(T, bool) or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < s < 1.0):
        raise ConfigError(f"sqrt schedule offset s must be in (0, 1), got {s!r}")
    steps = np.arange(T + 1, dtype=np.float64)
    raw = np.maximum(1.0 - np.sqrt(steps / T + s), 0.0)
    raw[0] = 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        betas = 1.0 - raw[1:] / raw[:-1]
    betas = np.nan_to_num(betas, nan=BETA_MAX)
    betas = np.clip(betas, BETA_MIN, BETA_MAX)
    return NoiseSchedule.from_betas(betas)


def q_sample(sched: NoiseSchedule, x0, t, noise):
    """Closed-form forward noising ``sqrt(ab_t) x0 + sqrt(1 - ab_t) noise``."""
    if tuple(x0.shape) != tuple(noise.shape):
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs noise {tuple(noise.shape)}")
    sched.check_t(t)
    ab = sched.coef("alpha_bar", t, like=x0)
    if torch.is_tensor(x0):
        return ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def posterior_mean_var(sched: NoiseSchedule, x_t, x0_hat, t):
    """Mean and (isotropic) variance of ``q(x_{t-1} | x_t, x0_hat)``."""
    if tuple(x_t.shape) != tuple(x0_hat.shape):
        raise ValueError(f"shape mismatch: x_t {tuple(x_t.shape)} vs x0 {tuple(x0_hat.shape)}")
    sched.check_t(t)
    c0 = sched.coef("post_coef_x0", t, like=x_t)
    ct = sched.coef("post_coef_xt", t, like=x_t)
    mean = c0 * x0_hat + ct * x_t
    var = sched.coef("posterior_var", t)
    if np.ndim(var) == 0:
        var = float(var)
    return mean, var


def default_sigma0(sched: NoiseSchedule) -> float:
    # posterior_var[1] is exactly 0 because alpha_bar[0] == 1
    return math.sqrt(max(float(sched.posterior_var[1]), 0.0))
