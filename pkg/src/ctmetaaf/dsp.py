"""Signal primitives: framing, real DFT pairs, log-mel features and WAV I/O."""
from __future__ import annotations

import wave
from functools import lru_cache

import numpy as np

from .autodiff import ops
from .autodiff.tape import Var
from .errors import ConfigurationError

SAMPLE_RATE = 16000
N_MELS = 40
MEL_FFT = 512
MEL_HOP = 256
LOG_FLOOR = 1e-8


def frame_signal(x, window: int, hop: int) -> np.ndarray:
    """Split ``x`` into ``ceil(len/hop)`` blocks of ``window`` samples.

    Block ``t`` covers samples ``[t*hop, t*hop + window)``; the tail is zero
    padded so the last block is full.
    """
    if window <= 0 or hop <= 0 or hop > window:
        raise ConfigurationError(f"need window > 0 and 0 < hop <= window, got {window}, {hop}")
    x = np.asarray(x, dtype=np.float64)
    n = -(-len(x) // hop)
    if n == 0:
        return np.zeros((0, window))
    padded = np.zeros((n - 1) * hop + window)
    padded[:len(x)] = x
    view = np.lib.stride_tricks.sliding_window_view(padded, window)[::hop]
    return view[:n].copy()


def dft_real(block, K: int | None = None) -> np.ndarray:
    """Non-redundant half (K/2 + 1 bins) of the DFT of a real block."""
    block = np.asarray(block, dtype=np.float64)
    if K is not None and block.shape[-1] != K:
        raise ConfigurationError(f"block length {block.shape[-1]} != K={K}")
    return np.fft.rfft(block, axis=-1)


def idft_real(spectrum, K: int) -> np.ndarray:
    spectrum = np.asarray(spectrum)
    if spectrum.shape[-1] != K // 2 + 1:
        raise ConfigurationError(f"spectrum has {spectrum.shape[-1]} bins, expected {K // 2 + 1}")
    return np.fft.irfft(spectrum, n=K, axis=-1)


def full_spectrum(half, K: int) -> np.ndarray:
    """Rebuild all K bins from the half spectrum using conjugate symmetry."""
    half = np.asarray(half)
    tail = np.conj(half[..., 1:K - K // 2][..., ::-1])
    return np.concatenate([half, tail], axis=-1)


def periodic_hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def _mel_filterbank(n_mels, n_fft, sample_rate):
    fmax = sample_rate / 2
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (center - lo)
    down = (hi - freqs) / (hi - center)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb, edges[1:-1].copy()


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = MEL_FFT, sample_rate: int = SAMPLE_RATE):
    """HTK-scale triangular filters with unit peak, 0 Hz to Nyquist.

    Returns ``(weights, centers_hz)`` with weights shaped (n_mels, n_fft//2+1).
    """
    return _mel_filterbank(n_mels, n_fft, sample_rate)


def mel_spectrogram(x, n_fft: int = MEL_FFT, hop: int = MEL_HOP, n_mels: int = N_MELS,
                    sample_rate: int = SAMPLE_RATE, floor: float = LOG_FLOOR):
    """Log-mel energies of shape (..., ceil(N/hop), n_mels).

    Accepts a numpy array or a tape variable over the last axis; the tape
    path keeps gradients flowing into the waveform.
    """
    if n_fft % hop:
        raise ConfigurationError("n_fft must be a multiple of hop")
    n = (x.shape[-1])
    lead = tuple(x.shape[:-1])
    frames_n = -(-n // hop)
    if frames_n == 0:
        return np.zeros(lead + (0, n_mels))
    r = n_fft // hop
    total = (frames_n + r - 1) * hop
    if not isinstance(x, Var):
        x = np.asarray(x, dtype=np.float64)
    if total > n:
        x = ops.concatenate([x, np.zeros(lead + (total - n,))], axis=-1)
    blocks = ops.reshape(x, lead + (frames_n + r - 1, hop))
    sl = (slice(None),) * len(lead)
    frames = ops.concatenate([blocks[sl + (slice(j, j + frames_n),)] for j in range(r)], axis=-1)
    spec = ops.rfft(frames * periodic_hann(n_fft))
    power = ops.abs2(spec)
    fb, _ = mel_filterbank(n_mels, n_fft, sample_rate)
    return ops.log(ops.maximum(power @ fb.T, floor))


def read_wav(path) -> np.ndarray:
    """Read mono 16-bit PCM at 16 kHz as float64 in [-1, 1)."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise ConfigurationError(f"{path}: expected mono audio, got {w.getnchannels()} channels")
        if w.getframerate() != SAMPLE_RATE:
            raise ConfigurationError(f"{path}: expected {SAMPLE_RATE} Hz, got {w.getframerate()} Hz")
        if w.getsampwidth() != 2:
            raise ConfigurationError(f"{path}: expected 16-bit PCM, got {8 * w.getsampwidth()}-bit")
        raw = w.readframes(w.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0


def write_wav(path, x) -> None:
    x = np.asarray(x, dtype=np.float64)
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(SAMPLE_RATE)
        w.writeframes(pcm.tobytes())
