"""Loss terms of the synchronous image-label objective.

All batched functions take tensors shaped (B, 1, H, W) and a per-element
integer time vector ``t`` of length B (a scalar ``t`` is broadcast).  They
return the batch mean so the result is a scalar tensor that autograd can
differentiate.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Literal

import numpy as np
import torch

from .diffusion import reconstruct_origin
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class LossWeights:
    sigma2_mode: Literal["beta", "tilde_beta"] = "tilde_beta"
    lambda_dice: float = 1.0
    lambda_p: float = 1.0
    p2_k: float = 1.0
    p2_gamma: float = 1.0
    T_p: int | None = None  # None resolves to T // 10
    dice_smooth: float = 1.0
    dice_temperature: float = 4.0  # sigmoid steepness applied to the {-1, +1} label scale

    def validate(self, T: int) -> None:
        if self.sigma2_mode not in ("beta", "tilde_beta"):
            raise ValueError(f"unknown sigma2_mode {self.sigma2_mode!r}")
        if min(self.lambda_dice, self.lambda_p, self.dice_smooth) < 0:
            raise ValueError("loss multipliers must be non-negative")
        if self.resolved_T_p(T) > T:
            raise ValueError(f"T_p={self.T_p} exceeds T={T}")

    def resolved_T_p(self, T: int) -> int:
        return max(1, T // 10) if self.T_p is None else int(self.T_p)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    l_d1: torch.Tensor
    l_d2: torch.Tensor
    l_p: torch.Tensor
    l_d0: torch.Tensor
    l_dice: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("l_d1", "l_d2", "l_p", "l_d0", "l_dice", "total")}


def _t_array(t, sched: NoiseSchedule, batch: int) -> np.ndarray:
    tt = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    tt = np.broadcast_to(tt.astype(np.int64), (batch,)) if tt.ndim == 0 else tt.astype(np.int64)
    if tt.shape != (batch,):
        raise ValueError(f"t must be scalar or have length {batch}, got shape {tt.shape}")
    if tt.min() < 1 or tt.max() > sched.T:
        raise ValueError(f"t outside [1, {sched.T}]")
    return tt


def sigma2(sched: NoiseSchedule, t, w: LossWeights) -> np.ndarray:
    """Reverse-step variance per t.  ``tilde_beta`` falls back to ``beta`` at t = 1 where it is zero."""
    t = np.asarray(t, dtype=np.int64)
    if w.sigma2_mode == "beta":
        return sched.beta[t]
    return np.where(t == 1, sched.beta[t], sched.tilde_beta[t])


def weight_d1(sched: NoiseSchedule, t, w: LossWeights) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    return sched.alpha_bar[t - 1] / (2.0 * sigma2(sched, t, w))


def weight_d2(sched: NoiseSchedule, t, w: LossWeights) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    return sched.alpha[t] * sched.gamma[t - 1] ** 2 / (2.0 * sigma2(sched, t, w) * sched.gamma[t])


def p2_weight(sched: NoiseSchedule, t, w: LossWeights) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if t.min(initial=1) < 1 or t.max(initial=1) > sched.T:
        raise ValueError(f"t outside [1, {sched.T}]")
    snr = sched.alpha_bar[t] / sched.gamma[t]
    return 1.0 / (w.p2_k + snr) ** w.p2_gamma


def _per_element_mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    d = (a - b) ** 2
    return d.reshape(d.shape[0], -1).mean(dim=1) if d.ndim > 1 else d.mean().reshape(1)


def _as_weight(values, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(np.asarray(values, dtype=np.float64), dtype=like.dtype, device=like.device)


def loss_d1(y0, y0_hat, t, sched: NoiseSchedule, w: LossWeights) -> torch.Tensor:
    mse = _per_element_mse(y0, y0_hat)
    tt = _t_array(t, sched, mse.shape[0])
    return (_as_weight(weight_d1(sched, tt, w), mse) * mse).mean()


def loss_d2(eps, eps_hat, t, sched: NoiseSchedule, w: LossWeights) -> torch.Tensor:
    mse = _per_element_mse(eps, eps_hat)
    tt = _t_array(t, sched, mse.shape[0])
    return (_as_weight(weight_d2(sched, tt, w), mse) * mse).mean()


def loss_p(y_t, y_hat_t) -> torch.Tensor:
    return _per_element_mse(y_t, y_hat_t).mean()


def _per_element_dice(prob: torch.Tensor, target: torch.Tensor, smooth: float) -> torch.Tensor:
    if prob.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(prob.shape)} vs {tuple(target.shape)}")
    p = prob.reshape(prob.shape[0], -1) if prob.ndim > 1 else prob.reshape(1, -1)
    g = target.reshape(p.shape).to(p.dtype)
    inter = (p * g).sum(dim=1)
    return 1.0 - (2.0 * inter + smooth) / (p.sum(dim=1) + g.sum(dim=1) + smooth)


def dice_loss(y0_prob, y0_bin, smooth: float = 1.0) -> torch.Tensor:
    """Soft dice ``1 - (2 sum(p g) + s) / (sum p + sum g + s)``, averaged over the batch."""
    return _per_element_dice(y0_prob, y0_bin, smooth).mean()


def composite(
    y0: torch.Tensor,
    eps: torch.Tensor,
    y_t: torch.Tensor,
    eps_hat: torch.Tensor,
    y_hat_t: torch.Tensor,
    t,
    sched: NoiseSchedule,
    w: LossWeights,
) -> LossBreakdown:
    """Full objective for one batch with per-element times.

    Elements drawn at t = 1 contribute their reconstruction error to ``l_d0``
    instead of ``l_d1``; the noisy-label term is active only for t <= T_p.
    """
    B = y0.shape[0]
    tt = _t_array(t, sched, B)
    T_p = w.resolved_T_p(sched.T)
    y0_hat = reconstruct_origin(sched, y_hat_t, eps_hat, tt)

    rec = _per_element_mse(y0, y0_hat)
    noise = _per_element_mse(eps, eps_hat)
    last = tt == 1
    wd1 = _as_weight(weight_d1(sched, tt, w), rec)
    d1 = wd1 * rec * _as_weight(~last, rec)
    d0 = wd1 * rec * _as_weight(last, rec)
    d2 = _as_weight(weight_d2(sched, tt, w), noise) * noise
    lp = _per_element_mse(y_t, y_hat_t) * _as_weight(tt <= T_p, rec)
    prob = torch.sigmoid(w.dice_temperature * y0_hat)
    dl = _per_element_dice(prob, (y0 > 0).to(prob.dtype), w.dice_smooth)
    p2 = _as_weight(p2_weight(sched, tt, w), rec)

    total = p2 * (d1 + d2) + w.lambda_p * lp + d0 + w.lambda_dice * dl
    return LossBreakdown(
        l_d1=d1.mean(), l_d2=d2.mean(), l_p=lp.mean(), l_d0=d0.mean(), l_dice=dl.mean(), total=total.mean()
    )


def format_log_line(step: int, t, bd: LossBreakdown) -> str:
    """One machine-parsable ``key=value`` line; ``t`` lists the batch times."""
    ts = ",".join(str(int(v)) for v in np.atleast_1d(np.asarray(t)))
    f = bd.as_floats()
    return (
        f"step={step} t={ts} l_d1={f['l_d1']:.8e} l_d2={f['l_d2']:.8e} l_p={f['l_p']:.8e} "
        f"l_d0={f['l_d0']:.8e} l_dice={f['l_dice']:.8e} total={f['total']:.8e}"
    )


def parse_log_line(line: str) -> dict:
    out = {}
    for item in line.split():
        key, _, value = item.partition("=")
        if key == "step":
            out[key] = int(value)
        elif key == "t":
            out[key] = [int(v) for v in value.split(",")]
        else:
            out[key] = float(value)
    return out
