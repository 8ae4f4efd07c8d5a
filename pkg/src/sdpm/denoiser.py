"""Two-stream U-Net denoiser and the despeckling post-layer.

One shared encoder/decoder trunk feeds two 1x1 heads: ``eps_head`` predicts
the shared diffusion noise and ``label_head`` predicts the noisy label
``y_t``.  Both heads start at zero, so a fresh model outputs zeros.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class DenoiserConfig:
    input_size: tuple[int, int] = (64, 64)
    base_channels: int = 16
    depth: int = 2
    time_embed_dim: int = 32
    attention_at: frozenset = field(default=None)
    time_scale: int = 500  # diffusion length T; times are embedded as t / time_scale

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if self.attention_at is None:
            object.__setattr__(self, "attention_at", frozenset({self.depth}))
        else:
            object.__setattr__(self, "attention_at", frozenset(int(v) for v in self.attention_at))
        self.validate()

    def validate(self) -> None:
        H, W = self.input_size
        if min(H, W, self.base_channels, self.time_embed_dim, self.time_scale) <= 0 or self.depth < 0:
            raise ValueError(f"all dimensions must be positive: {self}")
        if H % (2 ** self.depth) or W % (2 ** self.depth):
            raise ValueError(f"input size {self.input_size} not divisible by 2**{self.depth}")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if any(not 0 <= a <= self.depth for a in self.attention_at):
            raise ValueError(f"attention levels {sorted(self.attention_at)} outside [0, {self.depth}]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["attention_at"] = sorted(self.attention_at)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**{**d, "input_size": tuple(d["input_size"]), "attention_at": frozenset(d["attention_at"])})


def _groups(c: int) -> int:
    # at least two channels per group, otherwise the norm erases per-channel time shifts
    for g in (4, 2):
        if c % g == 0 and c // g >= 2:
            return g
    return 1


def sinusoidal_features(t: torch.Tensor, dim: int, time_scale: float) -> torch.Tensor:
    """Fixed sin/cos features of normalized time ``t / time_scale``."""
    half = dim // 2
    freqs = math.pi * torch.logspace(math.log10(0.5), math.log10(16.0), half, dtype=torch.float64)
    tau = t.to(torch.float64) / float(time_scale)
    args = tau[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time_proj = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else None

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + (x if self.skip is None else self.skip(x))


class SelfAttention(nn.Module):
    """Single-head spatial self-attention with a residual connection."""

    def __init__(self, c: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(c), c)
        self.qkv = nn.Conv2d(c, 3 * c, 1)
        self.proj = nn.Conv2d(c, c, 1)

    def forward(self, x):
        B, C, H, W = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(B, 3, C, H * W).unbind(1)
        att = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(C), dim=-1)
        out = torch.einsum("bij,bcj->bci", att, v).reshape(B, C, H, W)
        return x + self.proj(out)


class Denoiser(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        c, td, depth = config.base_channels, config.time_embed_dim, config.depth
        widths = [c * 2 ** level for level in range(depth + 1)]
        self.time_mlp = nn.Linear(td, td)
        self.in_conv = nn.Conv2d(1, c, 3, padding=1)
        self.down = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        prev = c
        for level in range(depth):
            self.down.append(ResBlock(prev, widths[level], td))
            self.down_attn.append(SelfAttention(widths[level]) if level in config.attention_at else nn.Identity())
            prev = widths[level]
        self.mid = ResBlock(prev, widths[depth], td)
        self.mid_attn = SelfAttention(widths[depth]) if depth in config.attention_at else nn.Identity()
        prev = widths[depth]
        self.up = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        for level in reversed(range(depth)):
            self.up.append(ResBlock(prev + widths[level], widths[level], td))
            self.up_attn.append(SelfAttention(widths[level]) if level in config.attention_at else nn.Identity())
            prev = widths[level]
        self.out_norm = nn.GroupNorm(_groups(c), c)
        self.eps_head = nn.Conv2d(c, 1, 1)
        self.label_head = nn.Conv2d(c, 1, 1)

    def embed_time(self, t: torch.Tensor) -> torch.Tensor:
        feats = sinusoidal_features(t, self.config.time_embed_dim, self.config.time_scale)
        return F.silu(self.time_mlp(feats.to(self.time_mlp.weight.dtype)))

    def trunk(self, x, t):
        temb = self.embed_time(t)
        h = self.in_conv(x)
        skips = []
        for block, attn in zip(self.down, self.down_attn):
            h = attn(block(h, temb))
            skips.append(h)
            h = F.avg_pool2d(h, 2)
        h = self.mid_attn(self.mid(h, temb))
        for block, attn in zip(self.up, self.up_attn):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = attn(block(torch.cat([h, skips.pop()], dim=1), temb))
        return F.silu(self.out_norm(h))

    def forward(self, x_t: torch.Tensor, t):
        """Return ``(eps_hat, y_hat_t)``, both shaped like ``x_t`` (B, 1, H, W)."""
        if x_t.ndim != 4 or x_t.shape[1] != 1 or tuple(x_t.shape[2:]) != self.config.input_size:
            raise ValueError(
                f"expected input (B, 1, {self.config.input_size[0]}, {self.config.input_size[1]}), "
                f"got {tuple(x_t.shape)}"
            )
        t = torch.as_tensor(t, device=x_t.device)
        if t.ndim == 0:
            t = t.expand(x_t.shape[0])
        h = self.trunk(x_t, t)
        return self.eps_head(h), self.label_head(h)


def init_weights(model: Denoiser, seed: int = 0) -> Denoiser:
    """Truncated-normal (std 0.02) kernels, zero biases, unit norm scales, zero heads."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.GroupNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()
            elif isinstance(module, (nn.Conv2d, nn.Linear)):
                w = torch.empty(module.weight.shape, dtype=torch.float64)
                nn.init.trunc_normal_(w, std=0.02, a=-0.04, b=0.04, generator=gen)
                module.weight.copy_(w.to(module.weight.dtype))
                module.bias.zero_()
        for head in (model.eps_head, model.label_head):
            head.weight.zero_()
    return model


def build_denoiser(config: DenoiserConfig, seed: int = 0) -> Denoiser:
    return init_weights(Denoiser(config), seed)


def param_manifest(model: nn.Module) -> list[tuple[str, tuple[int, ...]]]:
    """Deterministic ordered (name, shape) layout of every trainable array."""
    return [(n, tuple(p.shape)) for n, p in model.named_parameters()]


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def backward(model: Denoiser, x_t, t, grad_eps, grad_y) -> dict[str, torch.Tensor]:
    """Vector-Jacobian product: gradient of <grad_eps, eps_hat> + <grad_y, y_hat> w.r.t. every weight.

    Returns a fresh dict owned by the caller, in manifest order.
    """
    eps_hat, y_hat = model(x_t, t)
    if tuple(grad_eps.shape) != tuple(eps_hat.shape) or tuple(grad_y.shape) != tuple(y_hat.shape):
        raise ValueError("cotangent shapes must match the two outputs")
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(
        (eps_hat, y_hat), params, grad_outputs=(grad_eps, grad_y), allow_unused=True
    )
    return {n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, params, grads)}


def despeckle(y, kernel: int = 3, threshold: float = 2.0, level: float = 0.5):
    """Zero pixels whose all-ones window sum over the binarized map is below ``threshold``.

    The map is binarized at ``level``; pixels that survive keep their original
    value.  Accepts 2-D or batched (..., H, W) numpy arrays or tensors.
    """
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be odd and >= 1, got {kernel}")
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    is_np = not isinstance(y, torch.Tensor)
    yt = torch.as_tensor(np.asarray(y)) if is_np else y
    shape = yt.shape
    b = (yt >= level).to(torch.float64).reshape(-1, 1, shape[-2], shape[-1])
    ones = torch.ones(1, 1, kernel, kernel, dtype=torch.float64)
    counts = F.conv2d(b, ones, padding=kernel // 2).reshape(shape)
    out = torch.where(counts < threshold, torch.zeros_like(yt), yt)
    return out.numpy() if is_np else out
