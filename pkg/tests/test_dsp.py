from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from accentconv import dsp
from conftest import sine


def test_resample_identity_is_bit_identical():
    w = sine(300.0, 0.1)
    out = dsp.resample(w, 16000)
    assert out.sample_rate == 16000
    assert np.array_equal(out.samples, w.samples)


def test_resample_length_48k_to_16k():
    w = sine(440.0, 1.0, rate=48000)
    out = dsp.resample(w, 16000)
    assert abs(len(out) - 16000) <= 1


def test_resample_preserves_fft_peak():
    out = dsp.resample(sine(440.0, 1.0, rate=48000), 16000)
    assert abs(dsp.fft_peak_hz(out.samples, out.sample_rate) - 440.0) <= 2.0


def test_resample_rejects_bad_rate():
    with pytest.raises(ValueError):
        dsp.resample(sine(440.0, 0.1), 0)


def test_mel_frame_count_one_second():
    mel = dsp.mel_spectrogram(sine(440.0, 1.0))
    assert mel.values.shape == (80, 80)


def test_silence_gives_log_floor():
    mel = dsp.mel_spectrogram(dsp.Waveform(np.zeros(4000), 16000))
    assert np.allclose(mel.values, math.log(dsp.LOG_FLOOR))


def test_empty_waveform_rejected():
    with pytest.raises(ValueError):
        dsp.mel_spectrogram(dsp.Waveform(np.zeros(0), 16000))


def test_wrong_rate_rejected():
    with pytest.raises(ValueError):
        dsp.mel_spectrogram(sine(440.0, 0.1, rate=8000))


def test_sine_argmax_bin_is_440_bin():
    mel = dsp.mel_spectrogram(sine(440.0, 1.0))
    # oracle: the filter whose triangle gives 440 Hz the largest weight
    fb = dsp.mel_filterbank(n_fft=1 << 16)
    freqs = np.fft.rfftfreq(1 << 16, 1.0 / 16000)
    expected = int(np.argmax(fb[:, np.argmin(np.abs(freqs - 440.0))]))
    interior = np.argmax(mel.values[4:-4], axis=1)
    assert np.all(interior == interior[0])
    assert interior[0] == expected


def test_filterbank_shape_and_range():
    fb = dsp.mel_filterbank()
    assert fb.shape == (80, 401)
    assert fb.min() >= 0.0 and fb.max() <= 1.0 + 1e-12
    centers = dsp.mel_center_frequencies()
    assert centers[0] > 0 and centers[-1] < 8000
    assert np.all(np.diff(centers) > 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=1, max_value=6000))
def test_frame_count_shape_law(n):
    rng = np.random.default_rng(n)
    mel = dsp.mel_spectrogram(dsp.Waveform(rng.uniform(-0.5, 0.5, n), 16000))
    assert mel.values.shape == (math.ceil(n / 200), 80)


def test_framing_shifts_by_one_hop():
    rng = np.random.default_rng(3)
    x = rng.uniform(-0.5, 0.5, 4000)
    shifted = np.concatenate([np.zeros(200), x[:-200]])
    a = dsp.mel_spectrogram(dsp.Waveform(x, 16000)).values
    b = dsp.mel_spectrogram(dsp.Waveform(shifted, 16000)).values
    t = a.shape[0]
    # interior frames only: edges see reflect padding
    assert np.allclose(b[3 : t - 2], a[2 : t - 3], atol=1e-5)


# --------------------------------------------------------------------------
# normalization


def test_stats_two_utterance_fixture():
    rng = np.random.default_rng(0)
    a = dsp.MelSpectrogram(rng.normal(size=(3, 80)))
    b = dsp.MelSpectrogram(rng.normal(size=(5, 80)))
    stats = dsp.compute_stats([a, b])
    hand = [sum(a.values[i, k] for i in range(3)) + sum(b.values[i, k] for i in range(5)) for k in range(80)]
    assert np.allclose(stats.mean, np.array(hand) / 8, atol=1e-12)


def test_constant_corpus_std_floor():
    stats = dsp.compute_stats([dsp.MelSpectrogram(np.full((4, 80), -3.0))])
    assert np.all(stats.std == dsp.STD_FLOOR)
    out = dsp.normalize(dsp.MelSpectrogram(np.full((2, 80), -3.0)), stats)
    assert np.all(np.isfinite(out.values))


def test_compute_stats_empty():
    with pytest.raises(ValueError):
        dsp.compute_stats([])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 10.0), st.floats(-20.0, 5.0))
def test_normalize_round_trip(seed, scale, offset):
    rng = np.random.default_rng(seed)
    x = dsp.MelSpectrogram(offset + scale * rng.normal(size=(7, 80)))
    stats = dsp.MelStats(rng.normal(size=80), rng.uniform(0.1, 3.0, 80))
    assert np.max(np.abs(dsp.denormalize(dsp.normalize(x, stats), stats).values - x.values)) < 1e-6
    assert np.max(np.abs(dsp.normalize(dsp.denormalize(x, stats), stats).values - x.values)) < 1e-6


def test_normalized_corpus_is_standardized():
    rng = np.random.default_rng(1)
    mels = [dsp.MelSpectrogram(rng.normal(2.0, 3.0, size=(n, 80))) for n in (20, 31, 9)]
    stats = dsp.compute_stats(mels)
    z = np.concatenate([dsp.normalize(m, stats).values for m in mels])
    assert np.allclose(z.mean(0), 0.0, atol=1e-9)
    assert np.allclose(z.std(0), 1.0, atol=1e-9)


# --------------------------------------------------------------------------
# Griffin-Lim


def test_griffin_lim_silence():
    mel = dsp.MelSpectrogram(np.full((20, 80), math.log(dsp.LOG_FLOOR)))
    assert dsp.waveform_rms(dsp.griffin_lim(mel, 10)) < 1e-3


def test_griffin_lim_output_rate_and_length():
    mel = dsp.mel_spectrogram(sine(440.0, 0.25))
    out = dsp.griffin_lim(mel, 5)
    assert out.sample_rate == 16000
    assert len(out) == mel.num_frames * 200


def test_griffin_lim_deterministic():
    mel = dsp.mel_spectrogram(sine(523.0, 0.3))
    assert np.array_equal(dsp.griffin_lim(mel, 8).samples, dsp.griffin_lim(mel, 8).samples)


def test_griffin_lim_rejects_zero_iterations():
    with pytest.raises(ValueError):
        dsp.griffin_lim(dsp.mel_spectrogram(sine(440.0, 0.1)), 0)


def test_griffin_lim_convergence_non_increasing():
    two_tone = sine(440.0, 0.5).samples + sine(1300.0, 0.5, amp=0.3).samples
    mel = dsp.mel_spectrogram(dsp.Waveform(two_tone, 16000))
    mag = dsp.mel_to_linear(mel)
    errs = [dsp.spectral_convergence(mag, dsp.griffin_lim_padded(mag, k)) for k in (1, 10, 30, 60, 61)]
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))


def test_sine_round_trip_correlation():
    w = sine(440.0, 1.0)
    mel = dsp.mel_spectrogram(w)
    back = dsp.mel_spectrogram(dsp.griffin_lim(mel, 60))
    assert dsp.mel_correlation(mel, back) >= 0.9


def test_mel_correlation_domains():
    mel = dsp.mel_spectrogram(sine(440.0, 0.2))
    assert dsp.mel_correlation(mel, mel) == pytest.approx(1.0)
    assert dsp.mel_correlation(mel, mel, domain="log") == pytest.approx(1.0)
    with pytest.raises(ValueError):
        dsp.mel_correlation(mel, mel, domain="power")


# --------------------------------------------------------------------------
# I/O


def test_wav_round_trip(tmp_path):
    w = sine(440.0, 0.1)
    dsp.write_wav(tmp_path / "a.wav", w)
    back = dsp.read_wav(tmp_path / "a.wav")
    assert back.sample_rate == 16000
    assert np.max(np.abs(back.samples - w.samples)) < 1.0 / 32767 + 1e-9


def test_read_wav_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        dsp.read_wav(tmp_path / "missing.wav")
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"not a wav file")
    with pytest.raises(Exception):
        dsp.read_wav(bad)


def test_mel_dump_round_trip(tmp_path):
    mel = dsp.mel_spectrogram(sine(700.0, 0.2))
    dsp.write_mel_dump(tmp_path / "x.mel", mel)
    raw = (tmp_path / "x.mel").read_bytes()
    assert len(raw) == 16 + 4 * mel.num_frames * 80
    back = dsp.read_mel_dump(tmp_path / "x.mel")
    assert np.allclose(back.values, mel.values, atol=1e-5)


def test_mel_dump_rejects_truncation(tmp_path):
    mel = dsp.mel_spectrogram(sine(700.0, 0.2))
    dsp.write_mel_dump(tmp_path / "x.mel", mel)
    raw = (tmp_path / "x.mel").read_bytes()
    (tmp_path / "y.mel").write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        dsp.read_mel_dump(tmp_path / "y.mel")
    (tmp_path / "z.mel").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        dsp.read_mel_dump(tmp_path / "z.mel")


def test_types_reject_bad_values():
    with pytest.raises(ValueError):
        dsp.Waveform(np.zeros((2, 2)), 16000)
    with pytest.raises(ValueError):
        dsp.Waveform(np.array([np.nan]), 16000)
    with pytest.raises(ValueError):
        dsp.MelSpectrogram(np.zeros((3, 79)))
