import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from binaural_diffusion.audio_io import AudioClip, PoseTrack
from binaural_diffusion.errors import LengthMismatch
from binaural_diffusion.geom_warp import (
    Warpfield,
    apply_warp,
    compute_warpfield,
    ear_positions,
    rotate,
    warp_binaural,
)


def static_track(position, n, quaternion=(0, 0, 0, 1), rate=8000.0, ear_offsets=None):
    return PoseTrack.static(position, quaternion, n=n, rate=rate, ear_offsets=ear_offsets)


def brute_warp(x, rho):
    """Independent per-sample evaluation of the two-tap interpolation."""
    n = len(x)

    def at(i):
        if i < 0:
            return 0.0
        return x[min(i, n - 1)]

    out = np.empty(n)
    for k, r in enumerate(rho):
        lo, hi = int(np.floor(r)), int(np.ceil(r))
        out[k] = at(lo) if lo == hi else (hi - r) * at(lo) + (r - lo) * at(hi)
    return out


def test_zero_distance_identity_field():
    track = static_track([0, 0, 0], 50, ear_offsets=np.zeros((2, 3)))
    w = compute_warpfield(track, "left", 48000)
    assert np.array_equal(w.rho, np.arange(50.0))


def test_one_second_delay():
    track = static_track([0, 343.0, 0], 10, ear_offsets=np.zeros((2, 3)))
    w = compute_warpfield(track, "right", 48000, 343.0)
    assert np.allclose(w.rho, np.arange(10) - 48000, atol=1e-9, rtol=0)


def test_one_metre_delay():
    track = static_track([1.0, 0, 0], 4, ear_offsets=np.zeros((2, 3)))
    w = compute_warpfield(track, "left", 48000, 343.0)
    assert np.allclose(w.rho, np.arange(4) - 48000 / 343, atol=1e-12, rtol=0)
    assert w.rho[0] == pytest.approx(-139.941, abs=1e-3)


def test_warpfield_length_mismatch():
    with pytest.raises(LengthMismatch):
        compute_warpfield(static_track([1, 0, 0], 5), "left", 8000, n_samples=6)


def test_rho_never_reads_future():
    rng = np.random.default_rng(0)
    pos = rng.uniform(-3, 3, (200, 3))
    q = rng.standard_normal((200, 4))
    track = PoseTrack(8000.0, pos, q / np.linalg.norm(q, axis=1, keepdims=True))
    for ear in ("left", "right"):
        w = compute_warpfield(track, ear, 8000)
        assert np.all(w.rho <= np.arange(200))


def test_identity_warp():
    x = AudioClip.mono(np.random.default_rng(1).standard_normal(64), 8000)
    assert np.array_equal(apply_warp(x, Warpfield(np.arange(64.0), 8000)).samples, x.samples)


def test_integer_shift():
    x = np.arange(1.0, 11.0)
    out = apply_warp(AudioClip.mono(x, 8000), Warpfield(np.arange(10.0) - 2, 8000)).samples[0]
    assert out[:2].tolist() == [0, 0]
    assert np.array_equal(out[2:], x[:-2])


def test_ramp_half_sample():
    n = np.arange(32.0)
    out = apply_warp(AudioClip.mono(n, 8000), Warpfield(n - 0.5, 8000)).samples[0]
    assert np.allclose(out[1:], n[1:] - 0.5, atol=1e-12, rtol=0)


def test_reads_clamp_past_end():
    x = np.array([1.0, 2.0, 3.0])
    out = apply_warp(AudioClip.mono(x, 8000), Warpfield(np.array([2.5, 5.0, 1.5]), 8000)).samples[0]
    assert out.tolist() == [3.0, 3.0, 2.5]


def test_apply_warp_length_mismatch():
    with pytest.raises(LengthMismatch):
        apply_warp(AudioClip.mono(np.zeros(4), 8000), Warpfield(np.zeros(3), 8000))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 80), st.integers(0, 2**32 - 1))
def test_warp_matches_brute_force_and_is_bounded_and_linear(n, seed):
    rng = np.random.default_rng(seed)
    rho = np.arange(n) - rng.uniform(0, 10, n)
    x1, x2 = rng.standard_normal(n), rng.standard_normal(n)
    a, b = rng.standard_normal(2)
    w = Warpfield(rho, 8000)

    def warp(x):
        return apply_warp(AudioClip.mono(x, 8000), w).samples[0]

    y1 = warp(x1)
    assert np.allclose(y1, brute_warp(x1, rho), atol=1e-12, rtol=0)
    assert np.max(np.abs(y1)) <= np.max(np.abs(x1)) + 1e-12
    assert np.allclose(warp(a * x1 + b * x2), a * y1 + b * warp(x2), atol=1e-12, rtol=0)


def test_equidistant_source_gives_identical_channels():
    x = AudioClip.mono(np.random.default_rng(2).standard_normal(200), 8000)
    y = warp_binaural(x, static_track([1.5, 0, 0.3], 200))
    assert np.array_equal(y.samples[0], y.samples[1])


def click_train(n, period=97):
    x = np.zeros(n)
    x[5::period] = 1.0
    return x


def xcorr_lag(a, b):
    """Lag (samples) by which ``b`` trails ``a``."""
    c = np.correlate(b, a, mode="full")
    return int(np.argmax(c)) - (len(a) - 1)


def test_nearer_ear_leads_by_distance_difference():
    sr = 8000
    # ears on the y axis at +-0.09; source on the -y side so the left ear is nearer
    src = np.array([0.0, -1.5, 0.0])
    track = static_track(src, 1000)
    d_l = np.linalg.norm(src - [0, -0.09, 0])
    d_r = np.linalg.norm(src - [0, 0.09, 0])
    y = warp_binaural(AudioClip.mono(click_train(1000), sr), track)
    lag = xcorr_lag(y.samples[0], y.samples[1])
    assert lag >= 0
    assert abs(lag - sr / 343 * (d_r - d_l)) <= 1


def test_constant_distance_delay_recovered():
    sr = 8000
    track = static_track([1.3, 0, 0], 800, ear_offsets=np.zeros((2, 3)))
    x = np.zeros(800)
    x[100] = 1.0
    y = warp_binaural(AudioClip.mono(x, sr), track)
    lag = xcorr_lag(x, y.samples[0])
    assert abs(lag - sr / 343 * 1.3) <= 1


def test_one_metre_closer_left_ear():
    sr = 8000
    ears = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    # source at -x: left ear at origin is 1 m closer than the right ear at +1 m
    track = static_track([-2.0, 0, 0], 600, ear_offsets=ears)
    y = warp_binaural(AudioClip.mono(click_train(600, 131), sr), track)
    assert xcorr_lag(y.samples[0], y.samples[1]) == round(sr / 343 * 1.0)


def test_empty_input():
    y = warp_binaural(AudioClip.mono(np.zeros(0), 8000), static_track([1, 0, 0], 1))
    assert y.samples.shape == (2, 0)


def test_head_rotation_moves_ears():
    qz90 = [0, 0, np.sin(np.pi / 4), np.cos(np.pi / 4)]
    track = static_track([0, 0, 0], 1, quaternion=qz90)
    # rotating +90 deg about z carries the left ear (0,-0.09,0) onto (+0.09,0,0)
    assert np.allclose(ear_positions(track, "left")[0], [0.09, 0, 0], atol=1e-15)


def test_rotate_preserves_length():
    rng = np.random.default_rng(3)
    q = rng.standard_normal((50, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    v = rng.standard_normal((50, 3))
    assert np.allclose(np.linalg.norm(rotate(q, v), axis=1), np.linalg.norm(v, axis=1), atol=1e-12)
