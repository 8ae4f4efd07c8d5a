"""Synchronous forward diffusion of image/label pairs.

Every function accepts numpy arrays or torch tensors.  ``t`` is either a
Python integer applied to the whole array or a 1-D integer array with one
entry per leading-axis element of the inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np
import torch

from .schedule import NoiseSchedule, posterior_coeffs


@dataclass
class PairState:
    x: Any
    y: Any
    t: Any


def _is_scalar_t(t) -> bool:
    if isinstance(t, torch.Tensor):
        return t.ndim == 0
    return np.ndim(t) == 0


def _check_range(sched: NoiseSchedule, t, lo: int = 1):
    tt = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if tt.size == 0 or tt.min() < lo or tt.max() > sched.T:
        raise ValueError(f"t outside [{lo}, {sched.T}]: {tt!r}")
    return tt.astype(np.int64)


def coef(table: np.ndarray, t, like):
    """Gather ``table[t]`` and shape it to broadcast against ``like``."""
    if _is_scalar_t(t):
        return float(table[int(t)])
    idx = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    vals = table[idx.astype(np.int64)]
    shape = (-1,) + (1,) * (like.ndim - 1)
    if isinstance(like, torch.Tensor):
        return torch.as_tensor(vals, dtype=like.dtype, device=like.device).reshape(shape)
    return vals.astype(like.dtype, copy=False).reshape(shape)


def _sqrt(v):
    return v ** 0.5


def diffuse_pair(sched: NoiseSchedule, x0, y0, t, eps) -> PairState:
    """Noise image and label with the *same* draw ``eps``."""
    if tuple(x0.shape) != tuple(y0.shape) or tuple(x0.shape) != tuple(eps.shape):
        raise ValueError(
            f"shape mismatch: x0 {tuple(x0.shape)}, y0 {tuple(y0.shape)}, eps {tuple(eps.shape)}"
        )
    _check_range(sched, t)
    a = _sqrt(coef(sched.alpha_bar, t, x0))
    g = _sqrt(coef(sched.gamma, t, x0))
    return PairState(x=a * x0 + g * eps, y=a * y0 + g * eps, t=t)


def diffuse(sched: NoiseSchedule, z0, t, eps, allow_zero: bool = False):
    """Single-line version of :func:`diffuse_pair`.  ``t = 0`` returns ``z0``."""
    if tuple(z0.shape) != tuple(eps.shape):
        raise ValueError(f"shape mismatch: {tuple(z0.shape)} vs {tuple(eps.shape)}")
    _check_range(sched, t, lo=0 if allow_zero else 1)
    a = _sqrt(coef(sched.alpha_bar, t, z0))
    g = _sqrt(coef(sched.gamma, t, z0))
    return a * z0 + g * eps


def reconstruct_origin(sched: NoiseSchedule, z_t, eps_hat, t, allow_zero: bool = False):
    """Invert the closed-form marginal: ``z_t / sqrt(abar) - sqrt(gamma / abar) * eps_hat``.

    At ``t = 0`` (only with ``allow_zero``) this is the identity on ``z_t``.
    """
    if tuple(z_t.shape) != tuple(eps_hat.shape):
        raise ValueError(f"shape mismatch: {tuple(z_t.shape)} vs {tuple(eps_hat.shape)}")
    _check_range(sched, t, lo=0 if allow_zero else 1)
    ab = coef(sched.alpha_bar, t, z_t)
    g = coef(sched.gamma, t, z_t)
    return z_t / _sqrt(ab) - _sqrt(g / ab) * eps_hat


def posterior_mean(sched: NoiseSchedule, y0, eps_t, t: int):
    c_y0, c_eps, _ = posterior_coeffs(sched, t)
    return c_y0 * y0 + c_eps * eps_t


def posterior_sample(sched: NoiseSchedule, y0, eps_t, t: int, rng: np.random.Generator):
    """Draw from q(y_{t-1} | y_0, eps_t); deterministic at ``t = 1``."""
    c_y0, c_eps, var = posterior_coeffs(sched, t)
    mean = c_y0 * y0 + c_eps * eps_t
    if var == 0.0:
        return mean
    zeta = rng.standard_normal(tuple(y0.shape))
    if isinstance(y0, torch.Tensor):
        zeta = torch.as_tensor(zeta, dtype=y0.dtype, device=y0.device)
    else:
        zeta = zeta.astype(np.result_type(y0), copy=False)
    return mean + var ** 0.5 * zeta
