import numpy as np
import pytest
import torch

from sdpm.diffusion import diffuse_pair, reconstruct_origin
from sdpm.losses import (
    LossWeights,
    composite,
    dice_loss,
    format_log_line,
    loss_d1,
    loss_d2,
    loss_p,
    p2_weight,
    parse_log_line,
    sigma2,
    weight_d1,
    weight_d2,
)
from sdpm.schedule import build_sigmoid_schedule

import mpmath


@pytest.fixture(scope="module")
def sched():
    return build_sigmoid_schedule(T=100)


def rand(shape, seed):
    return torch.from_numpy(np.random.default_rng(seed).standard_normal(shape))


def test_d1_zero_for_exact_reconstruction(sched):
    y = rand((2, 1, 4, 4), 0)
    assert loss_d1(y, y.clone(), 20, sched, LossWeights()).item() == 0.0


def test_d1_weight_at_first_step_beta_mode(sched):
    w = LossWeights(sigma2_mode="beta")
    assert weight_d1(sched, 1, w) == pytest.approx(1.0 / (2 * sched.beta[1]), rel=1e-15)


def test_d1_scalar_recomputation(sched):
    y0, yh = rand((1, 1, 3, 3), 1), rand((1, 1, 3, 3), 2)
    w = LossWeights()
    t = 20
    s2 = sched.beta[t] * sched.gamma[t - 1] / sched.gamma[t]
    mse = sum((float(a) - float(b)) ** 2 for a, b in zip(y0.flatten(), yh.flatten())) / 9
    assert loss_d1(y0, yh, t, sched, w).item() == pytest.approx(sched.alpha_bar[t - 1] / (2 * s2) * mse, rel=1e-12)


def test_d2_zero_and_first_step_weight(sched):
    e = rand((2, 1, 4, 4), 3)
    assert loss_d2(e, e.clone(), 50, sched, LossWeights()).item() == 0.0
    for mode in ("beta", "tilde_beta"):
        assert weight_d2(sched, 1, LossWeights(sigma2_mode=mode)) == 0.0


def test_d2_scalar_recomputation(sched):
    e, eh = rand((1, 1, 2, 5), 4), rand((1, 1, 2, 5), 5)
    w = LossWeights(sigma2_mode="beta")
    t = 40
    weight = sched.alpha[t] * sched.gamma[t - 1] ** 2 / (2 * sched.beta[t] * sched.gamma[t])
    mse = float(((e - eh) ** 2).sum()) / 10
    assert loss_d2(e, eh, t, sched, w).item() == pytest.approx(weight * mse, rel=1e-12)


def test_lp_basic():
    y = rand((3, 1, 4, 4), 6)
    assert loss_p(y, y.clone()).item() == 0.0
    assert loss_p(y, y + 0.3).item() == pytest.approx(0.09, rel=1e-12)
    yh = rand((3, 1, 4, 4), 7)
    assert loss_p(y, yh).item() == pytest.approx(float(((y - yh) ** 2).mean()), rel=1e-12)
    with pytest.raises(ValueError):
        loss_p(y, yh[:, :, :2])


def test_dice_loss_limits():
    g = torch.zeros(1, 1, 4, 4)
    g[..., :2, :] = 1
    assert dice_loss(g, g, smooth=1e-9).item() == pytest.approx(0.0, abs=1e-8)
    assert dice_loss(torch.zeros_like(g), g, smooth=1e-9).item() == pytest.approx(1.0, abs=1e-8)


def test_dice_loss_half_map():
    g = torch.zeros(1, 1, 4, 4)
    g[..., :2, :] = 1
    p = torch.full_like(g, 0.5)
    # sum(p g) = 4, sum p = 8, sum g = 8, s = 1
    assert dice_loss(p, g, smooth=1.0).item() == pytest.approx(1 - 9 / 17, rel=1e-6)


def test_p2_weight_properties(sched):
    ts = np.arange(1, 101)
    np.testing.assert_array_equal(p2_weight(sched, ts, LossWeights(p2_gamma=0.0)), 1.0)
    w = p2_weight(sched, ts, LossWeights())
    assert np.all(np.diff(w) >= 0)
    with pytest.raises(ValueError):
        p2_weight(sched, 0, LossWeights())


def test_p2_weight_high_precision(sched):
    mpmath.mp.dps = 40
    ab = mpmath.mpf(1)
    for k in range(1, 51):
        ab *= 1 - mpmath.mpf(float(sched.beta[k]))
    ref = 1 / (1 + ab / (1 - ab))
    assert float(p2_weight(sched, 50, LossWeights(p2_k=1, p2_gamma=1))) == pytest.approx(float(ref), rel=1e-12)


@pytest.mark.parametrize("mode", ["beta", "tilde_beta"])
def test_weights_finite_and_nonnegative(sched, mode):
    w = LossWeights(sigma2_mode=mode)
    ts = np.arange(1, sched.T + 1)
    for arr in (weight_d1(sched, ts, w), weight_d2(sched, ts, w), p2_weight(sched, ts, w), sigma2(sched, ts, w)):
        assert np.all(np.isfinite(arr)) and np.all(arr >= 0)


def _batch(sched, seed, t):
    rng = np.random.default_rng(seed)
    B = len(t)
    x0 = torch.from_numpy(rng.uniform(-1, 1, (B, 1, 6, 6)))
    y0 = torch.from_numpy(np.where(rng.random((B, 1, 6, 6)) < 0.3, 1.0, -1.0))
    eps = torch.from_numpy(rng.standard_normal((B, 1, 6, 6)))
    return x0, y0, eps, diffuse_pair(sched, x0, y0, np.asarray(t), eps)


def test_composite_zero_at_perfect_prediction(sched):
    t = np.array([1, 2, 5, 60, 100])
    _, y0, eps, pair = _batch(sched, 0, t)
    w = LossWeights(lambda_dice=0.0)
    bd = composite(y0, eps, pair.y, eps.clone(), pair.y.clone(), t, sched, w)
    for k, v in bd.as_floats().items():
        if k != "l_dice":  # reported unweighted; sigmoid of +-1 is not a hard mask
            assert v == pytest.approx(0.0, abs=1e-18), k


def test_perfect_prediction_reconstructs_origin(sched):
    t = np.array([3, 77])
    _, y0, eps, pair = _batch(sched, 1, t)
    torch.testing.assert_close(reconstruct_origin(sched, pair.y, eps, t), y0, rtol=0, atol=1e-12)


def test_composite_switch_off(sched):
    t = np.array([4, 30, 90])
    _, y0, eps, pair = _batch(sched, 2, t)
    eh, yh = rand(eps.shape, 8), rand(eps.shape, 9)
    w = LossWeights(lambda_p=0.0, lambda_dice=0.0)
    bd = composite(y0, eps, pair.y, eh, yh, t, sched, w)
    y0h = reconstruct_origin(sched, yh, eh, t)
    expected = 0.0
    for b in range(3):
        p2 = float(p2_weight(sched, t[b], w))
        d1 = float(weight_d1(sched, t[b], w)) * float(((y0[b] - y0h[b]) ** 2).mean())
        d2 = float(weight_d2(sched, t[b], w)) * float(((eps[b] - eh[b]) ** 2).mean())
        expected += p2 * (d1 + d2) / 3
    assert bd.total.item() == pytest.approx(expected, rel=1e-10)


def test_composite_total_equals_sum_of_parts(sched):
    t = np.array([1, 7, 10, 11, 55])
    _, y0, eps, pair = _batch(sched, 3, t)
    eh, yh = rand(eps.shape, 10) * 0.5 + eps, rand(eps.shape, 11) * 0.5 + pair.y
    w = LossWeights()
    bd = composite(y0, eps, pair.y, eh, yh, t, sched, w)
    y0h = reconstruct_origin(sched, yh, eh, t)
    T_p = w.resolved_T_p(sched.T)
    total = 0.0
    for b in range(5):
        tb = int(t[b])
        rec = float(((y0[b] - y0h[b]) ** 2).mean())
        part_d1 = 0.0 if tb == 1 else float(weight_d1(sched, tb, w)) * rec
        part_d0 = float(weight_d1(sched, tb, w)) * rec if tb == 1 else 0.0
        part_d2 = float(weight_d2(sched, tb, w)) * float(((eps[b] - eh[b]) ** 2).mean())
        part_p = float(((pair.y[b] - yh[b]) ** 2).mean()) if tb <= T_p else 0.0
        p = torch.sigmoid(w.dice_temperature * y0h[b]).flatten()
        g = (y0[b] > 0).double().flatten()
        part_dice = 1 - (2 * float((p * g).sum()) + 1) / (float(p.sum()) + float(g.sum()) + 1)
        total += float(p2_weight(sched, tb, w)) * (part_d1 + part_d2) + part_p + part_d0 + part_dice
    assert bd.total.item() == pytest.approx(total / 5, rel=1e-6)


def test_log_line_round_trip(sched):
    t = np.array([3, 9])
    _, y0, eps, pair = _batch(sched, 4, t)
    bd = composite(y0, eps, pair.y, eps * 0.9, pair.y * 1.1, t, sched, LossWeights())
    line = format_log_line(12, t, bd)
    rec = parse_log_line(line)
    assert rec["step"] == 12 and rec["t"] == [3, 9]
    assert list(rec) == ["step", "t", "l_d1", "l_d2", "l_p", "l_d0", "l_dice", "total"]
    assert rec["total"] == pytest.approx(bd.total.item(), rel=1e-7)


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(T_p=200).validate(100)
    with pytest.raises(ValueError):
        LossWeights(sigma2_mode="other").validate(100)
    assert LossWeights().resolved_T_p(100) == 10
