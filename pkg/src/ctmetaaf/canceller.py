"""Multi-block frequency-domain echo canceller (overlap-save).

The filter holds ``B`` blocks of ``K/2 + 1`` complex coefficients and advances
by ``R = K/2`` samples per frame.  Only the non-redundant half spectrum is
stored.  The array helpers (``filter_output``, ``residual``,
``filter_gradient``) are written with ``autodiff.ops`` so the training loop
can record them on a tape; with numpy inputs they run as plain numpy.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import ops
from .errors import ConfigurationError, UsageError


def check_sizes(K: int, B: int) -> None:
    if K <= 0 or K % 2:
        raise ConfigurationError(f"K must be a positive even integer, got {K}")
    if B <= 0:
        raise ConfigurationError(f"B must be positive, got {B}")


@dataclass(frozen=True)
class FilterState:
    theta: np.ndarray          # (n_bins, B) complex
    input_buffer: np.ndarray   # (n_bins, B) complex, newest spectrum first
    sample_buffer: np.ndarray  # (K,) playback samples
    mix_buffer: np.ndarray     # (K,) mixture samples
    frame_index: int = 0

    @property
    def K(self) -> int:
        return self.sample_buffer.shape[-1]

    @property
    def R(self) -> int:
        return self.K // 2

    @property
    def B(self) -> int:
        return self.theta.shape[-1]


@dataclass(frozen=True)
class StepOutput:
    u_spec: np.ndarray
    d_spec: np.ndarray
    y_spec: np.ndarray
    e_spec: np.ndarray
    e_time: np.ndarray
    grad: np.ndarray


def init_state(K: int = 1024, B: int = 4) -> FilterState:
    check_sizes(K, B)
    nb = K // 2 + 1
    return FilterState(
        theta=np.zeros((nb, B), complex),
        input_buffer=np.zeros((nb, B), complex),
        sample_buffer=np.zeros(K),
        mix_buffer=np.zeros(K),
    )


def filter_output(theta, u_stack):
    """Echo estimate ``y[k] = sum_b theta[k, b] * u[k, tau - b]``."""
    return ops.sum(theta * u_stack, axis=-1)


def residual(d_spec, y_spec, K: int):
    """Return ``(e_spec, e_time)``; ``e_time`` is the alias-free last half."""
    e_spec = d_spec - y_spec
    e_time = ops.irfft(e_spec, K)[..., K // 2:]
    return e_spec, e_time


def constrain(grad, K: int):
    """Project per-block spectra onto filters supported on the first K/2 taps."""
    axes = list(range(np.ndim(grad.value if hasattr(grad, "value") else grad)))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    g = ops.transpose(grad, axes)
    mask = np.zeros(K)
    mask[:K // 2] = 1.0
    g = ops.rfft(ops.irfft(g, K) * mask)
    return ops.transpose(g, axes)


def filter_gradient(u_stack, e_spec, K: int | None = None, constrained: bool = False):
    """``-conj(u[k, tau-b]) * e[k]``: the conjugate Wirtinger derivative of
    ``sum_k |e[k]|^2`` with respect to ``theta[k, b]``.
    """
    grad = -(ops.conj(u_stack) * ops.reshape(e_spec, np.shape(_v(e_spec)) + (1,)))
    if constrained:
        if K is None:
            raise UsageError("K is required for the constrained gradient")
        grad = constrain(grad, K)
    return grad


def _v(x):
    return x.value if hasattr(x, "value") else x


def filter_step(state: FilterState, u_block, d_block, constrained: bool = False):
    """Advance one frame: consume R playback and R mixture samples."""
    R = state.R
    u_block = np.asarray(u_block, dtype=np.float64)
    d_block = np.asarray(d_block, dtype=np.float64)
    if u_block.shape != (R,) or d_block.shape != (R,):
        raise UsageError(f"expected blocks of {R} samples, got {u_block.shape} and {d_block.shape}")
    K = state.K
    sample_buffer = np.concatenate([state.sample_buffer[R:], u_block])
    mix_buffer = np.concatenate([state.mix_buffer[R:], d_block])
    u_spec = np.fft.rfft(sample_buffer)
    d_spec = np.fft.rfft(mix_buffer)
    input_buffer = np.concatenate([u_spec[:, None], state.input_buffer[:, :-1]], axis=1)
    y_spec = filter_output(state.theta, input_buffer)
    e_spec, e_time = residual(d_spec, y_spec, K)
    grad = filter_gradient(input_buffer, e_spec, K, constrained)
    out = StepOutput(u_spec, d_spec, y_spec, e_spec, e_time, grad)
    new_state = replace(state, input_buffer=input_buffer, sample_buffer=sample_buffer,
                        mix_buffer=mix_buffer, frame_index=state.frame_index + 1)
    return out, new_state


def apply_update(state: FilterState, delta) -> FilterState:
    """Additive update ``theta <- theta + delta``."""
    delta = np.asarray(delta)
    if delta.shape != state.theta.shape:
        raise UsageError(f"update shape {delta.shape} != filter shape {state.theta.shape}")
    return replace(state, theta=state.theta + delta)


def theta_from_impulse_response(w, K: int, B: int) -> np.ndarray:
    """Block-partitioned spectra of a time-domain response of up to B*K/2 taps."""
    check_sizes(K, B)
    R = K // 2
    w = np.asarray(w, dtype=np.float64)
    if len(w) > B * R:
        raise ConfigurationError(f"response has {len(w)} taps, filter holds {B * R}")
    padded = np.zeros(B * R)
    padded[:len(w)] = w
    blocks = np.zeros((B, K))
    blocks[:, :R] = padded.reshape(B, R)
    return np.fft.rfft(blocks, axis=-1).T


def frame_spectra(x, K: int) -> np.ndarray:
    """Spectra of the last K samples at every hop, as seen by ``filter_step``.

    ``x`` is (..., N); returns (..., ceil(N/R), K/2+1).
    """
    R = K // 2
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    T = -(-n // R)
    padded = np.zeros(x.shape[:-1] + ((T + 1) * R,))
    padded[..., R:R + n] = x
    blocks = padded.reshape(x.shape[:-1] + (T + 1, R))
    frames = np.concatenate([blocks[..., :-1, :], blocks[..., 1:, :]], axis=-1)
    return np.fft.rfft(frames, axis=-1)


def stack_blocks(spectra: np.ndarray, B: int) -> np.ndarray:
    """(..., T, n_bins) -> (..., T, n_bins, B) with ``[..., t, :, b] = spectra[t - b]``."""
    out = np.zeros(spectra.shape + (B,), dtype=spectra.dtype)
    for b in range(B):
        out[..., b:, :, b] = spectra[..., :spectra.shape[-2] - b, :]
    return out


def run_fixed(u, d, theta, K: int) -> np.ndarray:
    """Residual of a frozen filter over whole signals (length trimmed to ``len(d)``)."""
    B = theta.shape[-1]
    U = stack_blocks(frame_spectra(u, K), B)
    D = frame_spectra(d, K)
    _, e = residual(D, filter_output(theta, U), K)
    return e.reshape(e.shape[:-2] + (-1,))[..., :np.shape(d)[-1]]
