"""Training loop: augmentation, time/noise sampling, Adam, checkpoints.

Random draws come from Philox generators keyed by (seed, iteration, stream,
element), so any step can be replayed in isolation and resuming from a
checkpoint reproduces an uninterrupted run exactly.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from . import __version__
from .checkpoint import read_container, write_container
from .data import Sample
from .denoiser import Denoiser, DenoiserConfig, build_denoiser
from .diffusion import diffuse_pair
from .errors import CheckpointError, InvariantError
from .losses import LossBreakdown, LossWeights, composite, format_log_line
from .schedule import NoiseSchedule, ScheduleSpec, build_sigmoid_schedule

log = logging.getLogger(__name__)

AUGMENTATIONS = ("flip_h", "flip_v", "rotate90", "add_noise")
_BATCH_STREAM, _ELEMENT_STREAM = 0, 1


@dataclass(frozen=True)
class TrainConfig:
    i_max: int = 2000
    batch_size: int = 8
    lr_init: float = 1e-4
    lr_min: float = 6e-5
    seed: int = 0
    augment: frozenset = frozenset(AUGMENTATIONS)
    checkpoint_every: int = 0
    aug_noise_std: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "augment", frozenset(self.augment))
        if self.i_max < 1 or self.batch_size < 1:
            raise ValueError("i_max and batch_size must be >= 1")
        if not self.lr_init >= self.lr_min > 0:
            raise ValueError("need lr_init >= lr_min > 0")
        unknown = self.augment - set(AUGMENTATIONS)
        if unknown:
            raise ValueError(f"unknown augmentations {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = sorted(self.augment)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{**d, "augment": frozenset(d.get("augment", AUGMENTATIONS))})


def lr_at(i_c: int, cfg: TrainConfig) -> float:
    """``lr_init (1 - i/i_max)^0.9 + lr_min (i/i_max)^0.9``."""
    if not 0 <= i_c <= cfg.i_max:
        raise ValueError(f"iteration {i_c} outside [0, {cfg.i_max}]")
    r = i_c / cfg.i_max
    return cfg.lr_init * (1.0 - r) ** 0.9 + cfg.lr_min * r ** 0.9


@dataclass
class AdamState:
    m: list[torch.Tensor]
    v: list[torch.Tensor]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Iterable[torch.Tensor], **kw) -> "AdamState":
        params = list(params)
        return cls(m=[torch.zeros_like(p) for p in params], v=[torch.zeros_like(p) for p in params], **kw)


@torch.no_grad()
def adam_step(params: list[torch.Tensor], grads: list[torch.Tensor], state: AdamState, lr: float):
    """Bias-corrected Adam, applied in place in list order."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError("params, grads and moments must have equal length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch {tuple(p.shape)} / {tuple(g.shape)}")
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + state.eps))
    return params, state


def keyed_rng(seed: int, iteration: int, stream: int, index: int = 0) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence([int(seed), int(iteration), int(stream), int(index)]))
    )


def flip_h(s: Sample) -> Sample:
    return Sample(s.image[:, ::-1], s.label[:, ::-1], s.id)


def flip_v(s: Sample) -> Sample:
    return Sample(s.image[::-1, :], s.label[::-1, :], s.id)


def rotate90(s: Sample, k: int = 1) -> Sample:
    return Sample(np.rot90(s.image, k), np.rot90(s.label, k), s.id)


def augment(s: Sample, flags, rng: np.random.Generator, noise_std: float = 0.05) -> Sample:
    """Random spatial transforms shared by image and label; additive noise on the image only.

    A fixed number of draws is made per call whatever the flags, keeping the
    downstream generator state independent of the augmentation choice.
    """
    flags = frozenset(flags)
    u = rng.random(2)
    k = int(rng.integers(0, 4))
    noise = rng.standard_normal(s.image.shape)
    out = s
    if "flip_h" in flags and u[0] < 0.5:
        out = flip_h(out)
    if "flip_v" in flags and u[1] < 0.5:
        out = flip_v(out)
    if "rotate90" in flags and k and out.image.shape[0] == out.image.shape[1]:
        out = rotate90(out, k)
    if "add_noise" in flags:
        out = Sample(np.clip(out.image + noise_std * noise, -1.0, 1.0), out.label, out.id)
    return out


def draw_batch(samples: list[Sample], cfg: TrainConfig, sched: NoiseSchedule, iteration: int):
    """Pick, augment, and noise one batch; returns (x0, y0, eps, t) arrays."""
    idx = keyed_rng(cfg.seed, iteration, _BATCH_STREAM).integers(0, len(samples), size=cfg.batch_size)
    xs, ys, es, ts = [], [], [], []
    for b, i in enumerate(idx):
        rng = keyed_rng(cfg.seed, iteration, _ELEMENT_STREAM, b)
        s = augment(samples[int(i)], cfg.augment, rng, cfg.aug_noise_std)
        ts.append(int(rng.integers(1, sched.T + 1)))
        es.append(rng.standard_normal(s.image.shape))
        xs.append(s.image)
        ys.append(s.label)
    stack = lambda a: torch.from_numpy(np.stack(a)[:, None].astype(np.float32))  # noqa: E731
    return stack(xs), stack(ys), stack(es), np.asarray(ts, dtype=np.int64)


def batch_loss(model, sched, weights, x0, y0, eps, t) -> LossBreakdown:
    pair = diffuse_pair(sched, x0, y0, t, eps)
    eps_hat, y_hat = model(pair.x, torch.as_tensor(t))
    return composite(y0, eps, pair.y, eps_hat, y_hat, t, sched, weights)


def train_step(model: Denoiser, state: AdamState, batch: list[Sample], sched: NoiseSchedule,
               weights: LossWeights, cfg: TrainConfig, iteration: int):
    """One optimization step; randomness is keyed by ``(cfg.seed, iteration)``."""
    x0, y0, eps, t = draw_batch(batch, cfg, sched, iteration)
    bd = batch_loss(model, sched, weights, x0, y0, eps, t)
    if not torch.isfinite(bd.total):
        raise InvariantError(f"non-finite loss at iteration {iteration}: {bd.as_floats()}")
    params = list(model.parameters())
    grads = torch.autograd.grad(bd.total, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    adam_step(params, grads, state, lr_at(iteration, cfg))
    return model, state, bd, t


@torch.no_grad()
def evaluation_loss(model, samples: list[Sample], sched: NoiseSchedule, weights: LossWeights,
                    ts=None, seed: int = 12345) -> LossBreakdown:
    """Composite loss on a fixed (sample, t, noise) grid, for tracking progress deterministically."""
    ts = np.arange(1, sched.T + 1) if ts is None else np.asarray(ts, dtype=np.int64)
    rows = [(s, int(t)) for s in samples for t in ts]
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed])))
    x0 = torch.from_numpy(np.stack([s.image for s, _ in rows])[:, None])
    y0 = torch.from_numpy(np.stack([s.label for s, _ in rows])[:, None])
    eps = torch.from_numpy(rng.standard_normal(tuple(x0.shape)).astype(np.float32))
    t = np.asarray([t for _, t in rows], dtype=np.int64)
    return batch_loss(model, sched, weights, x0, y0, eps, t)


@dataclass
class Trainer:
    model: Denoiser
    sched: NoiseSchedule
    weights: LossWeights
    cfg: TrainConfig
    samples: list[Sample]
    state: AdamState = None
    iteration: int = 0
    run_config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.samples:
            raise ValueError("training needs at least one sample")
        self.weights.validate(self.sched.T)
        if self.state is None:
            self.state = AdamState.zeros_like(self.model.parameters())

    def step(self) -> tuple[LossBreakdown, np.ndarray]:
        _, _, bd, t = train_step(self.model, self.state, self.samples, self.sched, self.weights,
                                 self.cfg, self.iteration)
        self.iteration += 1
        return bd, t

    def run(self, until: int | None = None, log_file=None, checkpoint_path=None,
            callback: Callable | None = None) -> list[dict]:
        """Train up to iteration ``until`` (default ``i_max``); returns per-step loss floats."""
        until = self.cfg.i_max if until is None else min(until, self.cfg.i_max)
        history = []
        while self.iteration < until:
            step = self.iteration
            bd, t = self.step()
            history.append(bd.as_floats())
            if log_file is not None:
                log_file.write(format_log_line(step, t, bd) + "\n")
            if callback is not None:
                callback(step, bd)
            if checkpoint_path and self.cfg.checkpoint_every and self.iteration % self.cfg.checkpoint_every == 0:
                self.save(checkpoint_path)
        return history

    def config_echo(self) -> dict:
        return {
            "denoiser": self.model.config.to_dict(),
            "schedule": self.sched.to_dict(),
            "losses": self.weights.to_dict(),
            "train": self.cfg.to_dict(),
            "run": self.run_config,
        }

    def save(self, path) -> Path:
        return save_checkpoint(path, self.model, self.state, self.config_echo(), self.iteration)


def save_checkpoint(path, model: Denoiser, state: AdamState | None, config: dict, iteration: int) -> Path:
    arrays = {}
    names = [n for n, _ in model.named_parameters()]
    for n, p in model.named_parameters():
        arrays[f"param.{n}"] = p.detach().cpu().numpy()
    if state is not None:
        for n, m, v in zip(names, state.m, state.v):
            arrays[f"adam.m.{n}"] = m.cpu().numpy()
            arrays[f"adam.v.{n}"] = v.cpu().numpy()
    header = {
        "tool": "sdpm",
        "tool_version": __version__,
        "config": config,
        "state": {
            "iteration": int(iteration),
            "adam": None if state is None else {
                "step": state.step, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps,
            },
        },
    }
    return write_container(path, arrays, header)


@dataclass
class Checkpoint:
    model: Denoiser
    sched: NoiseSchedule
    weights: LossWeights
    train: TrainConfig
    state: AdamState | None
    iteration: int
    header: dict

    def trainer(self, samples: list[Sample], cfg: TrainConfig | None = None) -> Trainer:
        return Trainer(self.model, self.sched, self.weights, cfg or self.train, samples, self.state,
                       self.iteration, self.header["config"].get("run", {}))


def load_checkpoint(path) -> Checkpoint:
    header, arrays = read_container(path)
    try:
        conf = header["config"]
        dcfg = DenoiserConfig.from_dict(conf["denoiser"])
        sched = build_sigmoid_schedule(ScheduleSpec(**conf["schedule"]))
        weights = LossWeights(**conf["losses"])
        tcfg = TrainConfig.from_dict(conf["train"])
        st = header["state"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: incomplete checkpoint header ({exc})") from exc
    model = Denoiser(dcfg)
    names = [n for n, _ in model.named_parameters()]
    expected = {f"param.{n}": tuple(p.shape) for n, p in model.named_parameters()}
    for key, shape in expected.items():
        if key not in arrays or tuple(arrays[key].shape) != shape:
            raise CheckpointError(f"{path}: parameter {key} missing or misshapen")
    with torch.no_grad():
        for n, p in model.named_parameters():
            p.copy_(torch.from_numpy(arrays[f"param.{n}"]))
    state = None
    if st.get("adam") is not None:
        a = st["adam"]
        try:
            state = AdamState(
                m=[torch.from_numpy(arrays[f"adam.m.{n}"].copy()) for n in names],
                v=[torch.from_numpy(arrays[f"adam.v.{n}"].copy()) for n in names],
                step=int(a["step"]), beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"],
            )
        except KeyError as exc:
            raise CheckpointError(f"{path}: optimizer moment {exc} missing") from exc
    model.eval()
    return Checkpoint(model, sched, weights, tcfg, state, int(st["iteration"]), header)


def new_model(input_size, T: int, base_channels: int = 16, depth: int = 2, time_embed_dim: int = 32,
              attention_at=None, seed: int = 0) -> Denoiser:
    cfg = DenoiserConfig(input_size=tuple(input_size), base_channels=base_channels, depth=depth,
                         time_embed_dim=time_embed_dim, attention_at=attention_at, time_scale=T)
    return build_denoiser(cfg, seed)
