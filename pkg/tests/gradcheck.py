"""Central finite-difference oracle for denoiser gradients."""

import numpy as np
import torch

from sdpm.diffusion import diffuse_pair
from sdpm.losses import LossWeights, composite
from sdpm.schedule import build_sigmoid_schedule


def randomize(model, seed=0, std=0.3):
    """Replace every weight (heads included) so no gradient path is trivially zero."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * std)
            if "norm" in name and name.endswith("weight"):
                p.add_(1.0)
    return model


def composite_loss_fn(model, seed, t, dtype, T=100):
    """Scalar composite loss of ``model`` on a fixed random batch."""
    sched = build_sigmoid_schedule(T=T)
    rng = np.random.default_rng(seed)
    H, W = model.config.input_size
    B = len(t)
    x0 = torch.from_numpy(rng.uniform(-1, 1, (B, 1, H, W))).to(dtype)
    y0 = torch.from_numpy(np.where(rng.random((B, 1, H, W)) < 0.4, 1.0, -1.0)).to(dtype)
    eps = torch.from_numpy(rng.standard_normal((B, 1, H, W))).to(dtype)
    tt = np.asarray(t)
    w = LossWeights(T_p=T)  # keep the noisy-label term active at every tested t

    def loss():
        pair = diffuse_pair(sched, x0, y0, tt, eps)
        eps_hat, y_hat = model(pair.x, torch.as_tensor(tt))
        return composite(y0, eps, pair.y, eps_hat, y_hat, tt, sched, w).total

    return loss


def analytic_gradients(model, loss_fn) -> dict:
    params = dict(model.named_parameters())
    grads = torch.autograd.grad(loss_fn(), list(params.values()))
    return {n: g.detach().to(torch.float64) for n, g in zip(params, grads)}


@torch.no_grad()
def fd_gradients(model, loss_fn, h=1e-5) -> dict:
    """Central differences over every element of every weight."""
    out = {}
    for name, p in model.named_parameters():
        flat = p.view(-1)
        fd = torch.empty(flat.numel(), dtype=torch.float64)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            fd[i] = (up - down) / (2 * h)
        out[name] = fd.view(p.shape)
    return out


def relative_errors(analytic: dict, fd: dict) -> dict:
    """Per-array ``|g_ad - g_fd| / max(|g_ad|, |g_fd|)`` in the Frobenius norm."""
    errs = {}
    for name, a in analytic.items():
        f = fd[name]
        scale = max(a.norm().item(), f.norm().item(), 1e-30)
        errs[name] = (a - f).norm().item() / scale
    return errs


def fd_relative_errors(model, loss_fn, h=1e-5):
    return relative_errors(analytic_gradients(model, loss_fn), fd_gradients(model, loss_fn, h))
