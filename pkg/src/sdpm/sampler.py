"""Label inference from a trained two-stream denoiser.

Four estimators are provided: direct output (``infer_avg``), the
salience-weighted window average (``infer_salient``), the average of reverse
Markov chains (``infer_markov``), and the union of their binarized masks
(``infer_union``).  Probability maps come from the {-1, +1} label encoding
via ``clip((y + 1) / 2, 0, 1)``.

Repeats are batched through the network, but each repeat draws its noise
from its own child generator, so results match running the repeats one at a
time.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .denoiser import despeckle
from .diffusion import reconstruct_origin
from .errors import ModelError
from .schedule import NoiseSchedule, posterior_coeffs


@dataclass(frozen=True)
class InferenceConfig:
    T_i: int | None = None  # None resolves to T // 2
    d_i: float = 0.5
    nu: float = 2.0
    N_sal: int = 100
    N_infer: int = 50
    threshold: float = 0.5
    seed: int = 0
    despeckle: bool = True
    despeckle_kernel: int = 3
    despeckle_threshold: float = 2.0
    max_batch: int = 128

    def resolved_T_i(self, T: int) -> int:
        return T // 2 if self.T_i is None else int(self.T_i)

    def validate(self, T: int) -> None:
        ti = self.resolved_T_i(T)
        if not 0 < ti <= T:
            raise ValueError(f"T_i={ti} outside (0, {T}]")
        if not 0 <= self.d_i < 1:
            raise ValueError(f"d_i={self.d_i} outside [0, 1)")
        if not self.nu > 1:
            raise ValueError("nu must exceed 1")
        if self.N_sal < 1 or self.N_infer < 1:
            raise ValueError("repeat counts must be >= 1")

    def to_dict(self, T: int | None = None) -> dict:
        d = asdict(self)
        if T is not None:
            d["T_i"] = self.resolved_T_i(T)
        return d


def to_prob(y):
    if isinstance(y, torch.Tensor):
        return ((y + 1.0) * 0.5).clamp(0.0, 1.0)
    return np.clip((np.asarray(y) + 1.0) * 0.5, 0.0, 1.0)


def _as_batch(model, x0) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(x0), dtype=torch.float32)
    if x.ndim != 2 or tuple(x.shape) != tuple(model.config.input_size):
        raise ModelError(f"image shape {tuple(x.shape)} does not match model input {model.config.input_size}")
    return x[None, None]


@torch.no_grad()
def _net(model, x: torch.Tensor, t, max_batch: int = 128):
    """Chunked no-grad forward; ``t`` is a scalar or one time per row."""
    t = torch.as_tensor(t)
    if t.ndim == 0:
        t = t.expand(x.shape[0])
    eps, ys = [], []
    for s in range(0, x.shape[0], max_batch):
        e, y = model(x[s:s + max_batch], t[s:s + max_batch])
        eps.append(e)
        ys.append(y)
    return torch.cat(eps), torch.cat(ys)


def _normal(rngs, shape) -> torch.Tensor:
    return torch.from_numpy(np.stack([r.standard_normal(shape) for r in rngs]).astype(np.float32))


def salience_weights(T_i: int, nu: float) -> np.ndarray:
    """``psi_t = 1 - (t / T_i) ** nu`` for t = 0..T_i."""
    if T_i < 1:
        raise ValueError("T_i must be >= 1")
    t = np.arange(T_i + 1, dtype=np.float64)
    return 1.0 - (t / T_i) ** nu


def il_chain(model, sched: NoiseSchedule, x0, cfg: InferenceConfig, rng: np.random.Generator, n: int = 1):
    """Run ``n`` independent reverse label chains from T_i; returns (n, H, W) probability maps."""
    T_i = cfg.resolved_T_i(sched.T)
    if not 0 < T_i <= sched.T:
        raise ValueError(f"T_i={T_i} outside (0, {sched.T}]")
    rngs = rng.spawn(n)
    x0b = _as_batch(model, x0).expand(n, -1, -1, -1)
    shape = tuple(x0b.shape[1:])

    ab = float(sched.alpha_bar[T_i])
    x_t = ab ** 0.5 * x0b + float(sched.gamma[T_i]) ** 0.5 * _normal(rngs, shape)
    eps_hat, y_t = _net(model, x_t, T_i, cfg.max_batch)
    y_final = None
    for t in range(T_i, 0, -1):
        x0_hat = reconstruct_origin(sched, x_t, eps_hat, t)
        y0_hat = reconstruct_origin(sched, y_t, eps_hat, t)
        c_y0, c_eps, _ = posterior_coeffs(sched, t)
        if t > 1:
            scale = float(sched.beta[t] * sched.gamma[t - 1] / sched.gamma[t])
            z = _normal(rngs, shape)
            x_t = c_y0 * x0_hat + c_eps * eps_hat + scale * z
            y_t = c_y0 * y0_hat + c_eps * eps_hat + cfg.d_i * scale * z
            eps_hat, _ = _net(model, x_t, t - 1, cfg.max_batch)
        else:
            y_final = c_y0 * y0_hat + c_eps * eps_hat
    return to_prob(y_final[:, 0]).numpy()


def infer_avg(model, sched: NoiseSchedule, x0, cfg: InferenceConfig | None = None):
    """Label stream at (x0, t = 0) as a probability map."""
    max_batch = cfg.max_batch if cfg else 128
    _, y = _net(model, _as_batch(model, x0), 0, max_batch)
    return to_prob(y[0, 0]).numpy()


def salient_estimates(model, sched: NoiseSchedule, x0, cfg: InferenceConfig, rng: np.random.Generator):
    """Per-repeat, per-time origin estimates as probability maps, shape (N, T_i + 1, H, W)."""
    T_i = cfg.resolved_T_i(sched.T)
    if T_i < 1:
        raise ValueError("salient inference needs T_i >= 1")
    N = cfg.N_sal
    rngs = rng.spawn(N)
    x0b = _as_batch(model, x0)
    H, W = x0b.shape[-2:]
    ts = np.arange(T_i + 1)
    eps = torch.from_numpy(
        np.stack([r.standard_normal((T_i + 1, 1, H, W)) for r in rngs]).astype(np.float32)
    ).reshape(N * (T_i + 1), 1, H, W)
    t_all = np.tile(ts, N)
    ab = torch.as_tensor(sched.alpha_bar[t_all], dtype=torch.float32).reshape(-1, 1, 1, 1)
    g = torch.as_tensor(sched.gamma[t_all], dtype=torch.float32).reshape(-1, 1, 1, 1)
    x_t = ab.sqrt() * x0b + g.sqrt() * eps
    eps_hat, y_hat = _net(model, x_t, torch.as_tensor(t_all), cfg.max_batch)
    y0_hat = reconstruct_origin(sched, y_hat, eps_hat, t_all, allow_zero=True)
    return to_prob(y0_hat[:, 0]).reshape(N, T_i + 1, H, W).numpy()


def infer_salient(model, sched: NoiseSchedule, x0, cfg: InferenceConfig, rng: np.random.Generator):
    """psi-weighted window average, normalized by the weight sum, averaged over repeats."""
    T_i = cfg.resolved_T_i(sched.T)
    est = salient_estimates(model, sched, x0, cfg, rng).astype(np.float64)
    psi = salience_weights(T_i, cfg.nu)
    weighted = np.tensordot(est, psi, axes=([1], [0])) / psi.sum()
    return weighted.mean(axis=0).astype(np.float32)


def infer_markov(model, sched: NoiseSchedule, x0, cfg: InferenceConfig, rng: np.random.Generator):
    runs = il_chain(model, sched, x0, cfg, rng, n=cfg.N_infer).astype(np.float64)
    return runs.mean(axis=0).astype(np.float32)


def threshold(prob, tau: float = 0.5, cfg: InferenceConfig | None = None) -> np.ndarray:
    """Binary mask ``prob >= tau``, despeckled when ``cfg.despeckle`` is set."""
    mask = (np.asarray(prob) >= tau).astype(np.uint8)
    if cfg is not None and cfg.despeckle:
        mask = despeckle(mask, cfg.despeckle_kernel, cfg.despeckle_threshold)
    return mask


def union_masks(masks, cfg: InferenceConfig | None = None) -> np.ndarray:
    out = np.zeros_like(np.asarray(masks[0]), dtype=bool)
    for m in masks:
        out |= np.asarray(m).astype(bool)
    out = out.astype(np.uint8)
    kernel, thr = (3, 2.0) if cfg is None else (cfg.despeckle_kernel, cfg.despeckle_threshold)
    return despeckle(out, kernel, thr)


def infer_all_maps(model, sched: NoiseSchedule, x0, cfg: InferenceConfig, rng: np.random.Generator) -> dict:
    """Probability maps of the three soft estimators, sharing one generator tree."""
    r_sal, r_inf = rng.spawn(2)
    return {
        "avg": infer_avg(model, sched, x0, cfg),
        "sal": infer_salient(model, sched, x0, cfg, r_sal),
        "infer": infer_markov(model, sched, x0, cfg, r_inf),
    }


def infer_union(model, sched: NoiseSchedule, x0, cfg: InferenceConfig, rng: np.random.Generator) -> np.ndarray:
    maps = infer_all_maps(model, sched, x0, cfg, rng)
    return union_masks([threshold(maps[k], cfg.threshold) for k in ("avg", "sal", "infer")], cfg)


MODES = ("avg", "sal", "infer", "all")


def predict_mask(model, sched: NoiseSchedule, x0, mode: str, cfg: InferenceConfig, rng: np.random.Generator):
    """Binary mask for one image under ``mode``."""
    if mode == "avg":
        return threshold(infer_avg(model, sched, x0, cfg), cfg.threshold, cfg)
    if mode == "sal":
        return threshold(infer_salient(model, sched, x0, cfg, rng), cfg.threshold, cfg)
    if mode == "infer":
        return threshold(infer_markov(model, sched, x0, cfg, rng), cfg.threshold, cfg)
    if mode == "all":
        return infer_union(model, sched, x0, cfg, rng)
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


def predict_all_modes(model, sched: NoiseSchedule, x0, cfg: InferenceConfig, rng: np.random.Generator) -> dict:
    """Masks for every mode from one set of soft maps (the union reuses the other three)."""
    maps = infer_all_maps(model, sched, x0, cfg, rng)
    masks = {k: threshold(v, cfg.threshold, cfg) for k, v in maps.items()}
    masks["all"] = union_masks([threshold(maps[k], cfg.threshold) for k in ("avg", "sal", "infer")], cfg)
    return masks


def case_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))
