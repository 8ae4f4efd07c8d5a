"""Sigmoid variance schedule and the coefficients derived from it.

Arrays are stored with length ``T + 1`` so that they can be indexed
directly by the diffusion time ``t``.  Index 0 holds the conventions for
the clean signal: ``beta[0] = 0``, ``alpha_bar[0] = 1``, ``gamma[0] = 0``
and ``tilde_beta[0] = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ScheduleSpec:
    T: int = 500
    beta_min: float = 1e-4
    beta_max: float = 0.02
    sharpness: float = 6.0

    def validate(self) -> None:
        if not isinstance(self.T, (int, np.integer)) or self.T < 1:
            raise ValueError(f"T must be a positive integer, got {self.T!r}")
        if not (0.0 < self.beta_min <= self.beta_max < 1.0):
            raise ValueError(
                f"beta bounds must satisfy 0 < beta_min <= beta_max < 1, "
                f"got ({self.beta_min}, {self.beta_max})"
            )
        if not self.sharpness > 0:
            raise ValueError(f"sharpness must be positive, got {self.sharpness}")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Precomputed per-step tables; immutable once built."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    gamma: np.ndarray
    tilde_beta: np.ndarray
    spec: ScheduleSpec | None = field(default=None)

    def check_t(self, t: int, lo: int = 1) -> int:
        t = int(t)
        if not lo <= t <= self.T:
            raise ValueError(f"t={t} outside [{lo}, {self.T}]")
        return t

    def to_dict(self) -> dict:
        s = self.spec
        if s is None:
            return {"T": self.T}
        return {"T": s.T, "beta_min": s.beta_min, "beta_max": s.beta_max, "sharpness": s.sharpness}


def from_betas(beta_1_to_T, spec: ScheduleSpec | None = None) -> NoiseSchedule:
    """Build a schedule from explicit per-step variances ``beta_1..beta_T``."""
    b = np.asarray(beta_1_to_T, dtype=np.longdouble)
    if b.ndim != 1 or b.size == 0:
        raise ValueError("need a non-empty 1-D array of betas")
    if np.any(b <= 0) or np.any(b >= 1):
        raise ValueError("every beta_t must lie in (0, 1)")
    T = int(b.size)
    beta_ext = np.concatenate([np.zeros(1, dtype=np.longdouble), b])
    alpha_ext = 1 - beta_ext
    # cumulative product in long double, rounded once to float64
    alpha_bar = np.cumprod(alpha_ext).astype(np.float64)
    gamma = 1.0 - alpha_bar
    beta = beta_ext.astype(np.float64)
    tilde = np.zeros(T + 1)
    tilde[1:] = beta[1:] * gamma[:-1] / gamma[1:]
    return NoiseSchedule(
        T=T,
        beta=_frozen(beta),
        alpha=_frozen(1.0 - beta),
        alpha_bar=_frozen(alpha_bar),
        gamma=_frozen(gamma),
        tilde_beta=_frozen(tilde),
        spec=spec,
    )


def sigmoid_betas(spec: ScheduleSpec) -> np.ndarray:
    spec.validate()
    t = np.arange(1, spec.T + 1, dtype=np.longdouble)
    z = spec.sharpness * (2 * t / spec.T - 1)
    sig = 1 / (1 + np.exp(-z))
    return spec.beta_min + (spec.beta_max - spec.beta_min) * sig


def build_sigmoid_schedule(spec: ScheduleSpec | None = None, **kwargs) -> NoiseSchedule:
    """Build the sigmoid ramp ``beta_min + (beta_max - beta_min) * sigmoid(k (2t/T - 1))``.

    Either pass a :class:`ScheduleSpec` or its fields as keyword arguments.
    """
    if spec is None:
        spec = ScheduleSpec(**kwargs)
    elif kwargs:
        raise TypeError("pass either a ScheduleSpec or keyword fields, not both")
    return from_betas(sigmoid_betas(spec), spec=spec)


def posterior_coeffs(sched: NoiseSchedule, t: int) -> tuple[float, float, float]:
    """Coefficients of q(y_{t-1} | y_0, eps_t) = N(c_y0 y_0 + c_eps eps_t, var I)."""
    t = sched.check_t(t)
    c_y0 = math.sqrt(sched.alpha_bar[t - 1])
    c_eps = math.sqrt(sched.alpha[t]) * sched.gamma[t - 1] / math.sqrt(sched.gamma[t])
    return c_y0, c_eps, float(sched.tilde_beta[t])


def snr(sched: NoiseSchedule, t: int) -> float:
    t = sched.check_t(t)
    return float(sched.alpha_bar[t] / sched.gamma[t])


def format_table(sched: NoiseSchedule) -> str:
    """Column-aligned dump: t, beta, alpha_bar, gamma, tilde_beta, SNR."""
    head = f"{'t':>6} {'beta':>14} {'alpha_bar':>14} {'gamma':>14} {'tilde_beta':>14} {'snr':>14}"
    rows = [head]
    for t in range(1, sched.T + 1):
        rows.append(
            f"{t:>6d} {sched.beta[t]:>14.6e} {sched.alpha_bar[t]:>14.6e} "
            f"{sched.gamma[t]:>14.6e} {sched.tilde_beta[t]:>14.6e} {snr(sched, t):>14.6e}"
        )
    return "\n".join(rows)
