import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctmetaaf import dsp
from ctmetaaf.errors import ConfigurationError


def oracle_frames(x, window, hop):
    n = -(-len(x) // hop)
    out = np.zeros((n, window))
    for t in range(n):
        for j in range(window):
            i = t * hop + j
            if i < len(x):
                out[t, j] = x[i]
    return out


def naive_dft(x):
    K = len(x)
    k = np.arange(K)
    return np.exp(-2j * np.pi * np.outer(k, k) / K) @ x


def test_frame_zeros():
    f = dsp.frame_signal(np.zeros(1024), 1024, 512)
    assert f.shape == (2, 1024) and not f.any()


def test_frame_impulse():
    x = np.zeros(4)
    x[0] = 1
    f = dsp.frame_signal(x, 4, 2)
    assert np.array_equal(f, [[1, 0, 0, 0], [0, 0, 0, 0]])


def test_frame_matches_index_oracle():
    x = np.random.default_rng(0).standard_normal(5000)
    np.testing.assert_array_equal(dsp.frame_signal(x, 1024, 512), oracle_frames(x, 1024, 512))


@pytest.mark.parametrize("window,hop", [(0, 1), (4, 0), (4, 5), (-2, 1)])
def test_frame_bad_sizes(window, hop):
    with pytest.raises(ConfigurationError):
        dsp.frame_signal(np.ones(8), window, hop)


def test_dft_matches_naive_and_round_trips():
    x = np.random.default_rng(1).standard_normal(16)
    half = dsp.dft_real(x, 16)
    np.testing.assert_allclose(dsp.full_spectrum(half, 16), naive_dft(x), atol=1e-12)
    np.testing.assert_allclose(dsp.idft_real(half, 16), x, rtol=1e-10, atol=1e-12)


def test_dft_zero_and_length_check():
    assert not dsp.dft_real(np.zeros(8), 8).any()
    with pytest.raises(ConfigurationError):
        dsp.dft_real(np.zeros(7), 8)
    with pytest.raises(ConfigurationError):
        dsp.idft_real(np.zeros(4), 8)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
def test_dft_linearity(logk, a, b, seed):
    K = 2 ** logk
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal(K), rng.standard_normal(K)
    np.testing.assert_allclose(dsp.dft_real(a * x + b * y), a * dsp.dft_real(x) + b * dsp.dft_real(y), atol=1e-10)


def test_full_spectrum_conjugate_symmetry():
    x = np.random.default_rng(2).standard_normal(10)
    full = dsp.full_spectrum(dsp.dft_real(x), 10)
    np.testing.assert_allclose(full[1:], np.conj(full[1:][::-1]), atol=1e-12)


def test_mel_filterbank_shape_and_peaks():
    fb, centers = dsp.mel_filterbank()
    assert fb.shape == (40, 257)
    assert np.all(fb >= 0) and np.all(fb.max(axis=1) <= 1.0 + 1e-12)
    assert np.all(np.diff(centers) > 0)


def test_mel_tone_peaks_at_nearest_band():
    t = np.arange(16000) / 16000
    mel = dsp.mel_spectrogram(np.sin(2 * np.pi * 1000 * t))
    _, centers = dsp.mel_filterbank()
    band = np.argmax(mel[5:-5].mean(axis=0))
    assert band == np.argmin(np.abs(centers - 1000))


def test_mel_silence_hits_floor_and_shapes():
    mel = dsp.mel_spectrogram(np.zeros(16000))
    assert mel.shape == (63, 40)
    np.testing.assert_allclose(mel, np.log(1e-8))
    assert dsp.mel_spectrogram(np.zeros(0)).shape == (0, 40)
    assert dsp.mel_spectrogram(np.zeros((3, 1000))).shape == (3, 4, 40)


def test_mel_matches_direct_stft_oracle():
    x = np.random.default_rng(3).standard_normal(3000)
    frames = oracle_frames(x, 512, 256)
    win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(512) / 512)
    power = np.abs(np.array([naive_dft(f * win)[:257] for f in frames])) ** 2
    fb, _ = dsp.mel_filterbank()
    np.testing.assert_allclose(dsp.mel_spectrogram(x), np.log(np.maximum(power @ fb.T, 1e-8)), atol=1e-9)


def test_wav_round_trip(tmp_path):
    x = np.sin(np.linspace(0, 20, 400)) * 0.5
    dsp.write_wav(tmp_path / "a.wav", x)
    np.testing.assert_allclose(dsp.read_wav(tmp_path / "a.wav"), x, atol=1 / 32768)


def test_wav_rejects_wrong_rate(tmp_path):
    import wave
    with wave.open(str(tmp_path / "b.wav"), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(8000)
        w.writeframes(b"\x00\x00" * 10)
    with pytest.raises(ConfigurationError):
        dsp.read_wav(tmp_path / "b.wav")
