from dataclasses import replace

import numpy as np
import pytest

from ctmetaaf import canceller as cn
from ctmetaaf.errors import UsageError
from ctmetaaf.metrics import erle


def stream(state, u, d):
    R = state.R
    outs = []
    for t in range(len(u) // R):
        out, state = cn.filter_step(state, u[t * R:(t + 1) * R], d[t * R:(t + 1) * R])
        outs.append(out)
    return outs, state


def test_zero_filter_passes_mixture_through():
    rng = np.random.default_rng(0)
    u, d = rng.standard_normal(256), rng.standard_normal(256)
    outs, _ = stream(cn.init_state(32, 2), u, d)
    # equal up to FFT round-off
    np.testing.assert_allclose(np.concatenate([o.e_time for o in outs]), d, rtol=0, atol=1e-12)


def test_unit_impulse_cancels_undelayed_echo():
    K, B = 32, 2
    rng = np.random.default_rng(1)
    u = rng.standard_normal(640)
    state = replace(cn.init_state(K, B), theta=cn.theta_from_impulse_response([1.0], K, B))
    outs, _ = stream(state, u, u.copy())
    assert np.max(np.abs(np.concatenate([o.e_time for o in outs]))) < 1e-6


@pytest.mark.parametrize("K,B", [(16, 1), (32, 3), (64, 2)])
def test_static_filter_matches_direct_convolution(K, B):
    rng = np.random.default_rng(K + B)
    R = K // 2
    w = rng.standard_normal(B * R)
    u = rng.standard_normal(40 * R)
    noise = 0.1 * rng.standard_normal(len(u))
    d = np.convolve(u, w)[:len(u)] + noise
    state = replace(cn.init_state(K, B), theta=cn.theta_from_impulse_response(w, K, B))
    outs, _ = stream(state, u, d)
    e = np.concatenate([o.e_time for o in outs])
    assert np.linalg.norm(e - noise) / np.linalg.norm(noise) < 1e-6


def test_run_fixed_matches_streaming():
    rng = np.random.default_rng(2)
    K, B = 32, 2
    theta = rng.standard_normal((17, B)) + 1j * rng.standard_normal((17, B))
    u, d = rng.standard_normal(320), rng.standard_normal(320)
    outs, _ = stream(replace(cn.init_state(K, B), theta=theta), u, d)
    np.testing.assert_allclose(cn.run_fixed(u, d, theta, K), np.concatenate([o.e_time for o in outs]), atol=1e-12)


def test_oracle_filter_erle_above_60db():
    rng = np.random.default_rng(3)
    K, B = 64, 2
    w = rng.standard_normal(50) * np.exp(-np.arange(50) / 10)
    u = rng.standard_normal(16000)
    d = np.convolve(u, w)[:16000]
    e = cn.run_fixed(u, d, cn.theta_from_impulse_response(w, K, B), K)
    assert erle(d, e, warmup=B * K // 2) >= 60


def test_block_size_mismatch():
    with pytest.raises(UsageError):
        cn.filter_step(cn.init_state(16, 1), np.zeros(7), np.zeros(8))


def test_step_is_deterministic():
    rng = np.random.default_rng(4)
    u, d = rng.standard_normal(8), rng.standard_normal(8)
    s = replace(cn.init_state(16, 2), theta=np.ones((9, 2), complex))
    a, _ = cn.filter_step(s, u, d)
    b, _ = cn.filter_step(s, u, d)
    assert a.e_time.tobytes() == b.e_time.tobytes() and a.grad.tobytes() == b.grad.tobytes()


def test_gradient_zero_error_and_linearity():
    rng = np.random.default_rng(5)
    u = rng.standard_normal((9, 2)) + 1j * rng.standard_normal((9, 2))
    e = rng.standard_normal(9) + 1j * rng.standard_normal(9)
    assert not cn.filter_gradient(u, np.zeros(9)).any()
    np.testing.assert_allclose(cn.filter_gradient(u, 2 * e), 2 * cn.filter_gradient(u, e))


def test_gradient_matches_finite_difference_k8():
    # d/dtheta of sum_k |e_k|^2 over the full K-point spectrum, as (re, im) pairs
    rng = np.random.default_rng(6)
    K = 8
    u = rng.standard_normal((5, 1)) + 1j * rng.standard_normal((5, 1))
    u[[0, -1]] = u[[0, -1]].real
    d = np.fft.rfft(rng.standard_normal(K))
    theta = rng.standard_normal((5, 1)) + 1j * rng.standard_normal((5, 1))

    def loss(th):
        return np.sum(np.abs(d - np.sum(th * u, axis=-1)) ** 2)

    eps = 1e-6
    fd = np.zeros_like(theta)
    for i in range(5):
        for step in (1, 1j):
            tp, tm = theta.copy(), theta.copy()
            tp[i, 0] += eps * step
            tm[i, 0] -= eps * step
            fd[i, 0] += step * (loss(tp) - loss(tm)) / (2 * eps)
    e = d - np.sum(theta * u, axis=-1)
    # (re, im) adjoint = 2 * conjugate Wirtinger derivative
    np.testing.assert_allclose(2 * cn.filter_gradient(u, e), fd, rtol=1e-4)


def test_constrained_gradient_is_causal():
    rng = np.random.default_rng(7)
    K = 16
    g = rng.standard_normal((9, 2)) + 1j * rng.standard_normal((9, 2))
    c = cn.constrain(g, K)
    taps = np.fft.irfft(c.T, n=K)
    assert np.max(np.abs(taps[:, K // 2:])) < 1e-12
    np.testing.assert_allclose(cn.constrain(c, K), c, atol=1e-12)


def test_apply_update():
    s = replace(cn.init_state(16, 2), theta=np.ones((9, 2), complex))
    assert np.array_equal(cn.apply_update(s, np.zeros((9, 2))).theta, s.theta)
    assert not cn.apply_update(s, -s.theta).theta.any()
    d1, d2 = np.full((9, 2), 0.5j), np.full((9, 2), -2.0)
    np.testing.assert_allclose(cn.apply_update(cn.apply_update(s, d1), d2).theta,
                               cn.apply_update(s, d1 + d2).theta)
    with pytest.raises(UsageError):
        cn.apply_update(s, np.zeros((9, 3)))


def test_frame_spectra_match_streaming_buffers():
    rng = np.random.default_rng(8)
    u = rng.standard_normal(100)
    outs, _ = stream(cn.init_state(16, 1), np.pad(u, (0, 4)), np.zeros(104))
    U = cn.frame_spectra(u, 16)
    assert U.shape == (13, 9)
    np.testing.assert_allclose(U, np.stack([o.u_spec for o in outs]), atol=1e-12)
