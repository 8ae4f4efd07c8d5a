import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sdpm.diffusion import diffuse_pair, posterior_mean, posterior_sample, reconstruct_origin
from sdpm.schedule import build_sigmoid_schedule, from_betas, posterior_coeffs


@pytest.fixture(scope="module")
def sched():
    return build_sigmoid_schedule(T=100)


def test_zero_noise(sched):
    rng = np.random.default_rng(0)
    x0, y0 = rng.standard_normal((2, 5, 5))
    p = diffuse_pair(sched, x0, y0, 30, np.zeros((5, 5)))
    a = math.sqrt(sched.alpha_bar[30])
    np.testing.assert_allclose(p.x, a * x0)
    np.testing.assert_allclose(p.y, a * y0)


def test_identical_origins_stay_identical(sched):
    rng = np.random.default_rng(1)
    z = rng.standard_normal((4, 4))
    for t in range(1, sched.T + 1):
        p = diffuse_pair(sched, z, z, t, rng.standard_normal((4, 4)))
        assert np.array_equal(p.x, p.y)


def test_elementwise_oracle_at_T(sched):
    rng = np.random.default_rng(2)
    x0, y0, eps = rng.standard_normal((3, 3, 4))
    p = diffuse_pair(sched, x0, y0, sched.T, eps)
    a, g = math.sqrt(sched.alpha_bar[sched.T]), math.sqrt(sched.gamma[sched.T])
    for i in range(3):
        for j in range(4):
            assert p.x[i, j] == pytest.approx(a * x0[i, j] + g * eps[i, j], abs=1e-14)
            assert p.y[i, j] == pytest.approx(a * y0[i, j] + g * eps[i, j], abs=1e-14)


def test_batched_times_match_scalar_times(sched):
    rng = np.random.default_rng(3)
    x0, y0, eps = (torch.from_numpy(a) for a in rng.standard_normal((3, 4, 1, 6, 6)))
    t = np.array([1, 17, 60, 100])
    p = diffuse_pair(sched, x0, y0, t, eps)
    for b in range(4):
        q = diffuse_pair(sched, x0[b], y0[b], int(t[b]), eps[b])
        torch.testing.assert_close(p.x[b], q.x)
        torch.testing.assert_close(p.y[b], q.y)


def test_shape_and_range_errors(sched):
    z = np.zeros((3, 3))
    with pytest.raises(ValueError):
        diffuse_pair(sched, z, np.zeros((3, 4)), 3, z)
    with pytest.raises(ValueError):
        diffuse_pair(sched, z, z, 0, z)
    with pytest.raises(ValueError):
        reconstruct_origin(sched, z, z, 101)


@settings(max_examples=40, deadline=None)
@given(
    x0=arrays(np.float64, (3, 3), elements=st.floats(-1, 1)),
    y0=arrays(np.float64, (3, 3), elements=st.floats(-1, 1)),
    eps=arrays(np.float64, (3, 3), elements=st.floats(-4, 4)),
    t=st.integers(1, 100),
)
def test_shared_noise_cancels(x0, y0, eps, t):
    s = build_sigmoid_schedule(T=100)
    p = diffuse_pair(s, x0, y0, t, eps)
    np.testing.assert_allclose(p.x - p.y, math.sqrt(s.alpha_bar[t]) * (x0 - y0), atol=1e-12)


def test_round_trip(sched):
    rng = np.random.default_rng(4)
    x0 = rng.uniform(-1, 1, (8, 8)).astype(np.float32)
    y0 = np.sign(rng.standard_normal((8, 8))).astype(np.float32)
    for t in (1, 10, 50, 100):
        eps = rng.standard_normal((8, 8)).astype(np.float32)
        p = diffuse_pair(sched, x0, y0, t, eps)
        np.testing.assert_allclose(reconstruct_origin(sched, p.x, eps, t), x0, atol=1e-5)
        np.testing.assert_allclose(reconstruct_origin(sched, p.y, eps, t), y0, atol=1e-5)


def test_reconstruct_quarter_alpha_bar():
    # two steps of beta = 0.5 give abar_2 = 0.25
    s = from_betas([0.5, 0.5])
    z = np.array([0.3, -1.2])
    np.testing.assert_allclose(reconstruct_origin(s, z, np.zeros(2), 2), 2 * z)


def test_reconstruct_elementwise_oracle(sched):
    rng = np.random.default_rng(5)
    z, e = rng.standard_normal((2, 5))
    out = reconstruct_origin(sched, z, e, 37)
    ab, g = sched.alpha_bar[37], sched.gamma[37]
    for i in range(5):
        assert out[i] == pytest.approx(z[i] / math.sqrt(ab) - math.sqrt(g / ab) * e[i], rel=1e-14)


def test_posterior_sample_first_step_is_exact(sched):
    rng = np.random.default_rng(6)
    y0, e = rng.standard_normal((2, 4, 4))
    assert np.array_equal(posterior_sample(sched, y0, e, 1, rng), y0)


def test_posterior_sample_zero_noise_mean(sched):
    y0 = np.linspace(-1, 1, 7)
    np.testing.assert_allclose(posterior_mean(sched, y0, np.zeros(7), 40), math.sqrt(sched.alpha_bar[39]) * y0)


def test_posterior_sample_statistics(sched):
    rng = np.random.default_rng(7)
    t, n = 60, 10_000
    y0, e = 0.8, -0.4
    draws = np.array([posterior_sample(sched, np.array([y0]), np.array([e]), t, rng)[0] for _ in range(n)])
    c_y0, c_eps, var = posterior_coeffs(sched, t)
    assert abs(draws.mean() - (c_y0 * y0 + c_eps * e)) < 4 * math.sqrt(var / n)
    assert abs(draws.var(ddof=1) - var) < 4 * var * math.sqrt(2 / (n - 1))


def test_posterior_mean_reduction(sched):
    """reconstruct_origin followed by the posterior coefficients gives the reverse-chain update."""
    rng = np.random.default_rng(8)
    y0, eps = rng.standard_normal((2, 6))
    for t in (2, 33, 100):
        y_t = diffuse_pair(sched, y0, y0, t, eps).y
        y0_hat = reconstruct_origin(sched, y_t, eps, t)
        c_y0, c_eps, _ = posterior_coeffs(sched, t)
        direct = math.sqrt(sched.alpha_bar[t - 1]) * y0 + math.sqrt(sched.alpha[t]) * sched.gamma[t - 1] / math.sqrt(
            sched.gamma[t]
        ) * eps
        np.testing.assert_allclose(c_y0 * y0_hat + c_eps * eps, direct, atol=1e-12)
