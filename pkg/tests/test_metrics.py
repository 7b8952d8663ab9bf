import shutil

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from binaural_diffusion.audio_io import AudioClip, channel_average, read_wav, write_wav
from binaural_diffusion.dsp_render import clip_id, read_manifest
from binaural_diffusion.errors import BadConfig, MissingPrediction, ShapeMismatch, SilentReference
from binaural_diffusion.metrics import (
    MetricConfig,
    MetricReport,
    StftConfig,
    amplitude_l2,
    evaluate_manifest,
    mrstft,
    phase_error,
    phase_l2,
    score,
    stft,
    stft_loss_terms,
    wave_l2,
    wrap_phase,
)

SMALL_STFT = StftConfig(64, 16)
SMALL_RES = ((32, 8), (64, 16), (128, 32))


def stereo(seed, n=512):
    return np.random.default_rng(seed).standard_normal((2, n))


# ---------------------------------------------------------------- Wave L2

def test_wave_l2_examples():
    ref = stereo(0)
    assert wave_l2(ref, ref) == 0.0
    assert wave_l2(ref + 0.1, ref) == pytest.approx(0.01, abs=1e-15)
    assert wave_l2([[1, 0], [0, 0]], [[0, 0], [0, 0]]) == 0.25


def test_wave_l2_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(5):
        a, b = rng.standard_normal((2, 1024)), rng.standard_normal((2, 1024))
        total = 0.0
        for c in range(2):
            for n in range(1024):
                total += (a[c, n] - b[c, n]) ** 2
        assert wave_l2(a, b) == pytest.approx(total / 2048, abs=1e-12)


def test_wave_l2_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        wave_l2(np.zeros((2, 4)), np.zeros((2, 5)))


# ---------------------------------------------------------------- STFT

def test_stft_zero_input():
    assert np.all(stft(np.zeros(300), SMALL_STFT) == 0)


@pytest.mark.parametrize("n", [1, 15, 16, 17, 300])
def test_stft_frame_count(n):
    assert stft(np.ones(n), SMALL_STFT).shape == (-(-n // 16), 33)


def test_stft_bin_concentration_rect():
    k, size = 5, 64
    x = np.cos(2 * np.pi * k * np.arange(size) / size)
    X = stft(x, StftConfig(size, size, "rect", center=False))
    assert X.shape == (1, 33)
    mag = np.abs(X[0])
    assert mag[k] == pytest.approx(size / 2, abs=1e-9)
    assert np.all(np.delete(mag, k) < 1e-9)


def test_stft_parseval():
    rng = np.random.default_rng(2)
    x = rng.standard_normal(400)
    cfg = StftConfig(64, 16)
    X = stft(x, cfg)
    xp = np.pad(x, 32, mode="reflect")
    w = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(64) / 64)
    weights = np.full(33, 2.0)
    weights[[0, -1]] = 1.0
    for i in range(X.shape[0]):
        frame = xp[i * 16:i * 16 + 64] * w
        assert np.sum(weights * np.abs(X[i]) ** 2) / 64 == pytest.approx(np.sum(frame ** 2), abs=1e-9)


def test_stft_bad_config():
    with pytest.raises(BadConfig):
        StftConfig(64, 0)
    with pytest.raises(BadConfig):
        StftConfig(64, 128)
    with pytest.raises(BadConfig):
        stft(np.zeros(0), SMALL_STFT)


# ---------------------------------------------------------------- amplitude / phase

def test_amplitude_phase_identical():
    ref = stereo(3)
    assert amplitude_l2(ref, ref, SMALL_STFT) == 0.0
    assert phase_l2(ref, ref, SMALL_STFT) == 0.0


def test_sign_flip():
    ref = stereo(4)
    assert amplitude_l2(-ref, ref, SMALL_STFT) == pytest.approx(0.0, abs=1e-20)
    for c in range(2):
        R = stft(ref[c], SMALL_STFT)
        err = phase_error(stft(-ref[c], SMALL_STFT), R)
        active = np.abs(R) >= 1e-8
        assert active.sum() > 0.9 * R.size
        assert np.allclose(err[active], np.pi ** 2, atol=1e-9)


def test_double_scale():
    ref = stereo(5)
    assert phase_l2(2 * ref, ref, SMALL_STFT) == pytest.approx(0.0, abs=1e-20)
    expected = np.mean([np.mean(np.abs(stft(r, SMALL_STFT)) ** 2) for r in ref])
    assert amplitude_l2(2 * ref, ref, SMALL_STFT) == pytest.approx(expected, rel=1e-12)


def test_silent_bins_have_no_phase_error():
    P = np.array([1e-10 + 0j, 1e-10j, 1.0])
    R = np.array([-1e-10 + 0j, 1e-10 + 0j, -1.0])
    assert phase_error(P, R).tolist() == [0.0, 0.0, pytest.approx(np.pi ** 2)]


def test_wrap_phase_range():
    d = np.linspace(-20, 20, 1001)
    w = wrap_phase(d)
    assert np.all(w > -np.pi) and np.all(w <= np.pi)
    assert np.allclose(np.cos(w), np.cos(d)) and np.allclose(np.sin(w), np.sin(d))
    assert wrap_phase(np.array([np.pi, -np.pi]))[1] == pytest.approx(np.pi)


@settings(max_examples=50)
@given(st.floats(-np.pi, np.pi), st.floats(-np.pi, np.pi), st.integers(-3, 3))
def test_phase_wrap_invariance(a, b, k):
    base = wrap_phase(a - b) ** 2
    assert wrap_phase((a + 2 * np.pi * k) - b) ** 2 == pytest.approx(base, abs=1e-9)
    assert wrap_phase(a - (b + 2 * np.pi * k)) ** 2 == pytest.approx(base, abs=1e-9)


# ---------------------------------------------------------------- MRSTFT

def test_mrstft_identical():
    ref = stereo(6)
    assert mrstft(ref, ref, SMALL_RES) == 0.0


def test_spectral_convergence_zero_prediction():
    ref = stereo(7)[0]
    for size, hop in SMALL_RES:
        assert stft_loss_terms(np.zeros_like(ref), ref, StftConfig(size, hop))[0] == 1.0


def test_spectral_convergence_double():
    ref = stereo(8)[0]
    for size, hop in SMALL_RES:
        sc, log_mag, lin = stft_loss_terms(2 * ref, ref, StftConfig(size, hop))
        assert sc == pytest.approx(1.0, abs=1e-12)
    assert mrstft(2 * stereo(8), stereo(8), SMALL_RES) > 0


def test_mrstft_matches_terms():
    pred, ref = stereo(9), stereo(10)
    manual = []
    for size, hop in SMALL_RES:
        for c in range(2):
            P = np.abs(stft(pred[c], StftConfig(size, hop)))
            R = np.abs(stft(ref[c], StftConfig(size, hop)))
            manual.append(np.linalg.norm(R - P) / np.linalg.norm(R)
                          + np.mean(np.abs(np.log(R + 1e-7) - np.log(P + 1e-7))) + np.mean(np.abs(R - P)))
    assert mrstft(pred, ref, SMALL_RES) == pytest.approx(np.mean(manual), rel=1e-12)


def test_mrstft_silent_reference():
    with pytest.raises(SilentReference):
        mrstft(stereo(0), np.zeros((2, 512)), SMALL_RES)


def test_mrstft_decreases_towards_reference():
    for seed in range(4):
        ref, noise = stereo(seed), stereo(seed + 100)
        vals = [mrstft((1 - a) * noise + a * ref, ref, SMALL_RES) for a in (0.0, 0.25, 0.5, 0.75, 1.0)]
        assert sum(b > a for a, b in zip(vals, vals[1:])) <= 1
        assert vals[-1] == 0.0


def test_metrics_nonnegative_and_zero_on_self():
    a, b = stereo(11), stereo(12)
    cfg = MetricConfig(SMALL_STFT, SMALL_RES)
    assert all(v == 0.0 for v in score(a, a, cfg).values())
    assert all(v >= 0 and np.isfinite(v) for v in score(a, b, cfg).values())


# ---------------------------------------------------------------- reports

def test_report_text():
    r = MetricReport([("a", {"wave_l2": 1.0, "mrstft": 2.0}), ("b", {"wave_l2": 3.0, "mrstft": 4.0})])
    assert r.to_text().splitlines() == ["clip,wave_l2,mrstft", "a,1.0,2.0", "b,3.0,4.0", "AGGREGATE,2.0,3.0"]


def copy_references(manifest, pred_dir):
    pred_dir.mkdir()
    for _, _, b in read_manifest(manifest):
        shutil.copy(b, pred_dir / f"{clip_id(b)}.wav")


def test_evaluate_self_is_zero(small_dataset, tmp_path):
    copy_references(small_dataset, tmp_path / "pred")
    report = evaluate_manifest(tmp_path / "pred", small_dataset, MetricConfig(SMALL_STFT, SMALL_RES))
    assert [n for n, _ in report.rows] == ["clip0000", "clip0001"]
    assert all(v == 0.0 for v in report.aggregate.values())
    assert report.to_text().splitlines()[-1].startswith("AGGREGATE,")


def test_evaluate_duplicated_average_beats_mono(small_dataset, tmp_path):
    for sub in ("avg", "mono"):
        (tmp_path / sub).mkdir()
    for mono, _, b in read_manifest(small_dataset):
        write_wav(channel_average(read_wav(b)), tmp_path / "avg" / f"{clip_id(b)}.wav")
        shutil.copy(mono, tmp_path / "mono" / f"{clip_id(b)}.wav")
    cfg = MetricConfig(SMALL_STFT, SMALL_RES)
    avg = evaluate_manifest(tmp_path / "avg", small_dataset, cfg)
    mono = evaluate_manifest(tmp_path / "mono", small_dataset, cfg)
    for (_, a), (_, m) in zip(avg.rows, mono.rows):
        assert a["wave_l2"] < m["wave_l2"]


def test_evaluate_missing_prediction(small_dataset, tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(MissingPrediction) as exc:
        evaluate_manifest(tmp_path / "empty", small_dataset)
    assert exc.value.row == 1


def test_evaluate_mono_prediction_duplicated(small_dataset, tmp_path):
    (tmp_path / "p").mkdir()
    rows = read_manifest(small_dataset)
    for _, _, b in rows:
        write_wav(AudioClip.mono(read_wav(b).samples[0], 8000), tmp_path / "p" / f"{clip_id(b)}.wav")
    report = evaluate_manifest(tmp_path / "p", small_dataset, MetricConfig(SMALL_STFT, SMALL_RES))
    ref = read_wav(rows[0][2]).samples
    assert report.rows[0][1]["wave_l2"] == pytest.approx(np.mean((ref[1] - ref[0]) ** 2) / 2, rel=1e-12)
