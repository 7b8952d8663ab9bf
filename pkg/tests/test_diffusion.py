import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from binaural_diffusion.diffusion import (
    DEFAULT_INFER_BETAS,
    NoiseSchedule,
    align_inference_schedule,
    forward_sample,
    make_schedule,
    posterior_mean,
    recover_x0,
    reverse_step,
    sample,
    training_loss,
)
from binaural_diffusion.errors import BadRange, ShapeMismatch, StepOutOfRange

TWO = NoiseSchedule([1e-4, 0.05])


def test_single_step_schedule():
    s = make_schedule("linear", 1, 0.1, 0.1)
    assert s.alpha_bar(1) == pytest.approx(0.9, abs=1e-15)


def test_two_step_alpha_bar():
    assert TWO.alpha_bar(2) == pytest.approx(0.949905, abs=1e-15)
    assert make_schedule("linear", 2, 1e-4, 0.05).alpha_bars.tolist() == TWO.alpha_bars.tolist()


@pytest.mark.parametrize("args", [(2, 1e-4, 1.0), (2, 0.0, 0.1), (0, 1e-4, 0.05), (2, 0.2, 0.1)])
def test_schedule_bad_range(args):
    with pytest.raises(BadRange):
        make_schedule("linear", *args)


def test_schedule_rejects_decreasing():
    with pytest.raises(BadRange):
        NoiseSchedule([0.2, 0.1])


def test_default_schedule_invariants():
    s = make_schedule()
    assert s.T == 200
    assert s.betas[0] == 1e-4 and s.betas[-1] == pytest.approx(0.05)
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert s.alpha_bar(0) == 1.0


def test_forward_branches():
    rng = np.random.default_rng(0)
    z0, eps = rng.standard_normal(10), rng.standard_normal(10)
    ab = TWO.alpha_bar(2)
    assert np.allclose(forward_sample(z0, 2, np.zeros(10), TWO), np.sqrt(ab) * z0, atol=1e-15)
    assert np.allclose(forward_sample(np.zeros(10), 2, eps, TWO), np.sqrt(1 - ab) * eps, atol=1e-15)


def test_forward_numeric_case():
    z = forward_sample(np.ones(1), 2, np.ones(1), TWO)
    assert z[0] == pytest.approx(np.sqrt(0.949905) + np.sqrt(0.050095), abs=1e-12)
    # decimal evaluation at 30 digits
    assert z[0] == pytest.approx(1.1984498226917799, abs=1e-12)
    assert recover_x0(z, 2, np.ones(1), TWO)[0] == pytest.approx(1.0, abs=1e-12)


def test_forward_errors():
    with pytest.raises(ShapeMismatch):
        forward_sample(np.zeros(3), 1, np.zeros(4), TWO)
    with pytest.raises(StepOutOfRange):
        forward_sample(np.zeros(3), 3, np.zeros(3), TWO)
    with pytest.raises(StepOutOfRange):
        forward_sample(np.zeros(3), 0, np.zeros(3), TWO)


@settings(max_examples=50)
@given(st.integers(1, 200), st.integers(0, 2**32 - 1))
def test_recover_inverts_forward(t, seed):
    s = make_schedule()
    rng = np.random.default_rng(seed)
    z0, eps = rng.standard_normal((2, 64)), rng.standard_normal((2, 64))
    assert np.allclose(recover_x0(forward_sample(z0, t, eps, s), t, eps, s), z0, atol=1e-12, rtol=0)


def test_recover_zero_eps_rescales():
    z = np.array([0.3, -1.0])
    assert np.allclose(recover_x0(z, 2, np.zeros(2), TWO), z / np.sqrt(TWO.alpha_bar(2)))


def test_posterior_mean_cases():
    z = np.array([0.4, -2.0])
    assert np.allclose(posterior_mean(z, 2, np.zeros(2), TWO), z / np.sqrt(0.95))
    assert np.array_equal(posterior_mean(np.zeros(2), 2, np.zeros(2), TWO), np.zeros(2))
    one = NoiseSchedule([0.1])
    mu = posterior_mean(np.ones(1), 1, np.ones(1), one)[0]
    assert mu == pytest.approx((1 - 0.1 / np.sqrt(0.1)) / np.sqrt(0.9), abs=1e-12)
    assert mu == pytest.approx(0.72076, abs=1e-5)


def test_reverse_variance_values():
    assert TWO.posterior_variance(1) == 0.0
    expected = (1 - 0.9999) / (1 - 0.949905) * 0.05
    assert TWO.posterior_variance(2) == pytest.approx(expected, abs=1e-15)
    assert TWO.posterior_variance(2) == pytest.approx(9.981e-5, abs=1e-8)


def test_posterior_variance_below_beta():
    s = make_schedule()
    v = np.array([s.posterior_variance(t) for t in range(1, s.T + 1)])
    assert np.all(v <= s.betas)


def test_last_step_deterministic():
    z, e = np.array([0.7, -0.1]), np.array([0.2, 0.5])
    mu = posterior_mean(z, 1, e, TWO)
    assert np.array_equal(reverse_step(z, 1, e, TWO, np.array([9.0, 9.0])), mu)
    assert np.array_equal(reverse_step(z, 2, e, TWO, np.zeros(2)), posterior_mean(z, 2, e, TWO))


def test_reverse_step_adds_scaled_noise():
    z, e, n = np.ones(3), np.zeros(3), np.array([1.0, -1.0, 2.0])
    out = reverse_step(z, 2, e, TWO, n)
    assert np.allclose(out, posterior_mean(z, 2, e, TWO) + np.sqrt(TWO.posterior_variance(2)) * n)


def test_training_loss_examples():
    assert training_loss([0.3, -1], [0.3, -1]) == 0.0
    assert training_loss([1, 1], [0, 0]) == 1.0
    assert training_loss([2], [0]) == 4.0
    with pytest.raises(ShapeMismatch):
        training_loss([1, 2], [1])


def zero_denoiser(z, t, cond):
    return np.zeros_like(z)


def test_sample_single_step_zero_denoiser():
    s = NoiseSchedule([0.1])
    z_T = np.random.default_rng(5).standard_normal((1, 16))
    out = sample(zero_denoiser, None, s, (1, 16), np.random.default_rng(5))
    assert np.allclose(out, z_T / np.sqrt(0.9), atol=1e-15)


def test_sample_deterministic_and_shaped():
    s = make_schedule(T=20)
    a = sample(zero_denoiser, None, s, (2, 33), np.random.default_rng(1))
    b = sample(zero_denoiser, None, s, (2, 33), np.random.default_rng(1))
    assert a.shape == (2, 33)
    assert np.array_equal(a, b)


def test_sample_with_oracle_denoiser_recovers_z0():
    s = make_schedule(T=50)
    z0 = np.sin(np.linspace(0, 20, 128))[None, :]

    def oracle(z, t, cond):
        ab = s.alpha_bar(t)
        return (z - np.sqrt(ab) * z0) / np.sqrt(1 - ab)

    out = sample(oracle, None, s, z0.shape, np.random.default_rng(2))
    assert np.allclose(out, z0, atol=1e-6, rtol=0)


def test_sample_rejects_bad_denoiser_shape():
    with pytest.raises(ShapeMismatch):
        sample(lambda z, t, c: np.zeros(3), None, make_schedule(T=2), (1, 4), np.random.default_rng(0))


def test_inference_alignment():
    train = make_schedule()
    infer = align_inference_schedule(DEFAULT_INFER_BETAS, train)
    assert infer.T == 6
    assert np.all(np.diff(infer.net_steps) > 0)
    for k in range(6):
        t = infer.net_steps[k]
        gap = abs(train.alpha_bar(t) - infer.alpha_bars[k])
        assert gap == min(abs(train.alpha_bars - infer.alpha_bars[k]))
    # the first inference step lands on the first training step
    assert infer.net_steps[0] == 1


def spectral_flatness(x):
    p = np.abs(np.fft.rfft(x)) ** 2 + 1e-20
    return np.exp(np.mean(np.log(p))) / np.mean(p)


def test_noise_fills_high_frequencies_first():
    s = make_schedule()
    rng = np.random.default_rng(3)
    # low-pass "speech-like" signal: smoothed noise
    z0 = np.convolve(rng.standard_normal(4096 + 63), np.hanning(64), mode="valid")
    z0 /= z0.std()
    eps = rng.standard_normal(z0.size)
    flat = [spectral_flatness(forward_sample(z0, t, eps, s)) for t in (1, 5, 20, 50, 100, 200)]
    assert all(b >= a * 0.98 for a, b in zip(flat, flat[1:]))
    assert flat[-1] > 10 * flat[0]


def test_monte_carlo_moments_small():
    s = make_schedule()
    rng = np.random.default_rng(4)
    z0 = 0.8
    for t in (10, 120):
        z = forward_sample(np.full(40000, z0), t, rng.standard_normal(40000), s)
        assert z.mean() == pytest.approx(np.sqrt(s.alpha_bar(t)) * z0, rel=0.02)
        assert z.var() == pytest.approx(1 - s.alpha_bar(t), rel=0.05)
