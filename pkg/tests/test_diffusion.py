import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dier.diffusion import (ddim_step, ddpm_reverse_step, make_linear_schedule, predict_x0, psnr,
                            q_sample, sample_from_noise, stochastic_encode, uniform_grid)
from dier.errors import ConfigError, DimensionError, UsageError
from dier.selfcheck import exact_eps_predictor
from dier.tensor import Tensor

SCHED = make_linear_schedule()

# prod(1 - linspace(1e-4, 0.02, 1000)) evaluated in float64 by a separate script
ALPHA_BAR_LAST = 4.035829765375676e-05


def test_small_schedule_values():
    s = make_linear_schedule(4, 0.1, 0.4)
    np.testing.assert_allclose(s.betas, [0.1, 0.2, 0.3, 0.4], rtol=1e-6)
    np.testing.assert_allclose(s.alphas, [0.9, 0.8, 0.7, 0.6], rtol=1e-6)
    np.testing.assert_allclose(s.alpha_bars, [0.9, 0.72, 0.504, 0.3024], rtol=1e-6)


def test_single_step_schedule():
    s = make_linear_schedule(1, 0.3, 0.3)
    np.testing.assert_allclose(s.betas, [0.3])
    np.testing.assert_allclose(s.alpha_bars, [0.7], rtol=1e-7)


def test_default_schedule_terminal_value():
    assert SCHED.alpha_bars[-1] < 5e-5
    assert SCHED.alpha_bars[-1] == pytest.approx(ALPHA_BAR_LAST, rel=1e-5)


def test_schedule_invariants():
    b = SCHED.betas
    assert np.all((b > 0) & (b < 1))
    assert np.all(np.diff(b) >= 0)
    assert np.all(np.diff(SCHED.alpha_bars.astype(np.float64)) < 0)
    np.testing.assert_array_equal(SCHED.alphas, np.float32(1) - SCHED.betas)
    ab = SCHED.alpha_bars.astype(np.float64)
    np.testing.assert_allclose(ab[1:], ab[:-1] * SCHED.alphas[1:].astype(np.float64), rtol=1e-6)


def test_marginal_variance_matches_composed_steps():
    ab = np.cumprod(1.0 - SCHED.betas.astype(np.float64))
    direct = 1.0 - ab
    var = 0.0
    for beta in SCHED.betas.astype(np.float64):
        var = (1.0 - beta) * var + beta  # variance after one more Gaussian step
    assert abs((1.0 - var) - ab[-1]) < 1e-10
    assert abs(direct[-1] - var) < 1e-10


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0)])
def test_bad_schedule(args):
    with pytest.raises(ConfigError):
        make_linear_schedule(*args)


def test_q_sample_zero_noise():
    x0 = np.random.default_rng(0).standard_normal((2, 3))
    out = q_sample(x0, 400, np.zeros_like(x0), SCHED).data
    np.testing.assert_allclose(out, np.sqrt(SCHED.alpha_bars[400]) * x0, rtol=1e-6)


def test_q_sample_345():
    s = make_linear_schedule(1, 0.64, 0.64)  # alpha_bar = 0.36
    assert q_sample(np.ones(1), 0, np.ones(1), s).item() == pytest.approx(1.4, rel=1e-6)


def test_q_sample_out_of_range():
    with pytest.raises(IndexError):
        q_sample(np.ones(2), 1000, np.ones(2), SCHED)
    with pytest.raises(IndexError):
        q_sample(np.ones(2), -1, np.ones(2), SCHED)


def test_q_sample_per_item_t():
    x0 = np.ones((3, 2))
    t = np.array([0, 500, 999])
    out = q_sample(x0, t, np.zeros_like(x0), SCHED).data
    np.testing.assert_allclose(out[:, 0], np.sqrt(SCHED.alpha_bars[t]), rtol=1e-6)


@pytest.mark.parametrize("t", [0, 111, 555, 999])
def test_q_sample_moments(t):
    rng = np.random.default_rng(t)
    x = q_sample(np.ones(100_000), np.full(100_000, t), sched=SCHED, rng=rng).data.astype(np.float64)
    ab = float(SCHED.alpha_bars[t])
    assert abs(x.mean() - np.sqrt(ab)) < 0.01
    assert abs(x.std() / np.sqrt(1 - ab) - 1) < 0.01


def test_ddpm_t0_is_the_mean():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 4))
    e = rng.standard_normal((2, 4))
    out = ddpm_reverse_step(x, e, 0, SCHED, rng=None).data
    a, b, ab = SCHED.alphas[0], SCHED.betas[0], SCHED.alpha_bars[0]
    mu = (x - float(b) / np.sqrt(1 - float(ab)) * e) / np.sqrt(float(a))
    np.testing.assert_allclose(out, mu, rtol=1e-5)


def test_implied_x0_with_true_eps():
    rng = np.random.default_rng(2)
    x0 = rng.uniform(-1, 1, (3, 5))
    eps = rng.standard_normal((3, 5))
    for t in (0, 10, 300, 900):
        xt = q_sample(x0, t, eps, SCHED)
        np.testing.assert_allclose(predict_x0(xt, eps, t, SCHED), x0, atol=1e-5 if t < 900 else 1e-3)


def test_ddpm_noise_variance():
    t = 300
    x = np.zeros((10_000, 1))
    out = ddpm_reverse_step(x, np.zeros_like(x), t, SCHED, rng=np.random.default_rng(3)).data
    ab_t, ab_p = float(SCHED.alpha_bars[t]), float(SCHED.alpha_bars[t - 1])
    beta_tilde = (1 - ab_p) / (1 - ab_t) * float(SCHED.betas[t])
    assert out.var() == pytest.approx(beta_tilde, rel=0.03)


def test_ddpm_shape_mismatch():
    with pytest.raises(DimensionError):
        ddpm_reverse_step(np.zeros((2, 3)), np.zeros((3, 2)), 5, SCHED, np.random.default_rng(0))


def test_ddim_to_clean_with_exact_eps():
    rng = np.random.default_rng(4)
    x0 = rng.uniform(-1, 1, (2, 6))
    eps = rng.standard_normal((2, 6))
    xt = q_sample(x0, 250, eps, SCHED).data.astype(np.float64)
    out = ddim_step(xt, eps, 250, -1, SCHED).data
    np.testing.assert_allclose(out, x0, atol=1e-5)


def test_ddim_zero_eps_rescales():
    x = np.random.default_rng(5).standard_normal((2, 3))
    out = ddim_step(x, np.zeros_like(x), 700, 200, SCHED).data
    ab = SCHED.alpha_bars.astype(np.float64)
    np.testing.assert_allclose(out, np.sqrt(ab[200] / ab[700]) * x, rtol=1e-6)


def test_ddim_same_t_rejected():
    with pytest.raises(UsageError):
        ddim_step(np.zeros(2), np.zeros(2), 3, 3, SCHED)


def test_oracle_roundtrip_ten_steps():
    rng = np.random.default_rng(6)
    x0 = rng.uniform(-1, 1, (4, 1, 4, 4))
    pred = exact_eps_predictor(x0, SCHED)
    grid = uniform_grid(1000, 10)
    code = stochastic_encode(x0, pred, grid, SCHED)
    back = sample_from_noise(code, pred, grid[::-1], SCHED, clip=False).data
    assert np.abs(back - x0).max() < 1e-4
    assert psnr(back, x0) > 80


@settings(max_examples=15, deadline=None)
@given(st.lists(st.integers(0, 999), min_size=2, max_size=12, unique=True), st.integers(0, 2**31))
def test_oracle_roundtrip_any_grid(points, seed):
    grid = sorted(points)
    x0 = np.random.default_rng(seed).uniform(-1, 1, (2, 1, 3, 3))
    pred = exact_eps_predictor(x0, SCHED)
    code = stochastic_encode(x0, pred, grid, SCHED)
    back = sample_from_noise(code, pred, grid[::-1], SCHED, clip=False).data
    assert np.abs(back - x0).max() < 1e-4


def test_single_step_encode_matches_hand_step():
    x0 = np.random.default_rng(7).uniform(-1, 1, (2, 3))
    pred = lambda x, t: Tensor(np.sin(x.data) * 0.3 + t[0] * 1e-3)  # noqa: E731
    code = stochastic_encode(x0, pred, [500], SCHED).data
    eps = np.sin(x0.astype(np.float32)) * 0.3
    hand = ddim_step(x0, eps, -1, 500, SCHED).data
    np.testing.assert_allclose(code, hand, rtol=1e-6)


def test_non_monotone_grid_rejected():
    pred = lambda x, t: Tensor(np.zeros_like(x.data))  # noqa: E731
    with pytest.raises(UsageError):
        stochastic_encode(np.zeros((1, 2)), pred, [0, 500, 400], SCHED)
    with pytest.raises(UsageError):
        sample_from_noise(np.zeros((1, 2)), pred, [0, 500], SCHED)


def test_ddim_decode_deterministic():
    x_T = np.random.default_rng(8).standard_normal((2, 1, 4, 4))
    pred = lambda x, t: Tensor(np.tanh(x.data) * 0.5)  # noqa: E731
    grid = uniform_grid(1000, 20)[::-1]
    a = sample_from_noise(x_T, pred, grid, SCHED).data
    b = sample_from_noise(x_T, pred, grid, SCHED).data
    assert a.tobytes() == b.tobytes()


def test_full_ddpm_chain_stays_finite():
    rng = np.random.default_rng(9)
    noise_rng = np.random.default_rng(10)
    pred = lambda x, t: Tensor(np.clip(noise_rng.standard_normal(x.shape) * 3, -10, 10))  # noqa: E731
    out = sample_from_noise(rng.standard_normal((2, 1, 4, 4)), pred, list(range(999, -1, -1)), SCHED,
                            mode="ddpm", rng=rng, clip=False).data
    assert np.all(np.isfinite(out))


def test_strided_ddpm_uses_respaced_variance():
    t, t_prev = 600, 400
    x = np.zeros((20_000, 1))
    out = ddpm_reverse_step(x, np.zeros_like(x), t, SCHED, np.random.default_rng(11), t_prev=t_prev).data
    ab = SCHED.alpha_bars.astype(np.float64)
    beta_eff = 1 - ab[t] / ab[t_prev]
    expected = (1 - ab[t_prev]) / (1 - ab[t]) * beta_eff
    assert out.var() == pytest.approx(expected, rel=0.03)


def test_psnr_identity_capped():
    x = np.random.default_rng(12).uniform(-1, 1, (3, 4))
    assert psnr(x, x) == 99.0


def test_psnr_known_value():
    # mse 0.04 on range 2 -> 10 log10(4 / 0.04) = 20 dB
    assert psnr(np.full(10, 0.2), np.zeros(10)) == pytest.approx(20.0)
