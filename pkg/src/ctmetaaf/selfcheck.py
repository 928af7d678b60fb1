"""Built-in check suites: overlap-save against direct convolution, finite
difference gradient checks, and loss identities."""
from __future__ import annotations

import math
import time

import numpy as np

from . import kws as kws_mod
from . import metaopt
from .autodiff import check_gradients, ops
from .canceller import filter_step, init_state, theta_from_impulse_response
from .training import SceneBatch, initial_state, joint_loss, meta_loss, unroll


def overlap_save_error(K: int = 64, B: int = 3, n: int = 4000, seed: int = 0) -> float:
    """Relative error between the streaming residual of a static filter and
    ``d - u * w`` computed by direct convolution."""
    rng = np.random.default_rng(seed)
    R = K // 2
    w = rng.standard_normal(B * R)
    u = rng.standard_normal(n)
    d = rng.standard_normal(n)
    direct = d - np.convolve(u, w)[:n]
    state = init_state(K, B)
    from dataclasses import replace
    state = replace(state, theta=theta_from_impulse_response(w, K, B))
    out = []
    for t in range(n // R):
        step, state = filter_step(state, u[t * R:(t + 1) * R], d[t * R:(t + 1) * R])
        out.append(step.e_time)
    e = np.concatenate(out)
    ref = direct[:len(e)]
    return float(np.linalg.norm(e - ref) / np.linalg.norm(ref))


def _c(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def primitive_cases(seed: int = 0) -> dict:
    """name -> (scalar function of a param dict, params)."""
    rng = np.random.default_rng(seed)
    r = lambda *s: rng.standard_normal(s)  # noqa: E731
    pos = lambda *s: rng.uniform(0.5, 2.0, s)  # noqa: E731
    W = np.array([0.3, -1.2, 0.7, 2.0])
    cw = _c(rng, 4)
    w8 = r(8)

    def loss_c(z):
        # generic real scalar of a complex tensor
        return ops.sum(ops.real(z * cw[: z.shape[-1]]) + ops.abs2(z) * 0.1)

    return {
        "add": (lambda p: ops.sum(ops.abs2(p["a"] + p["b"])), {"a": _c(rng, 3), "b": r(3)}),
        "sub": (lambda p: ops.sum(ops.abs2(p["a"] - p["b"])), {"a": _c(rng, 3), "b": _c(rng, 1)}),
        "mul": (lambda p: loss_c(p["a"] * p["b"]), {"a": _c(rng, 2, 4), "b": r(4)}),
        "div": (lambda p: loss_c(p["a"] / p["b"]), {"a": _c(rng, 4), "b": _c(rng, 4) + 3}),
        "neg_conj": (lambda p: loss_c(-ops.conj(p["a"])), {"a": _c(rng, 4)}),
        "real_imag": (lambda p: ops.sum(ops.real(p["a"]) * W + ops.imag(p["a"]) * W[::-1]),
                      {"a": _c(rng, 4)}),
        "make_complex": (lambda p: loss_c(ops.make_complex(p["x"], p["y"])), {"x": r(4), "y": r(4)}),
        "abs": (lambda p: ops.sum(ops.abs(p["a"]) * W), {"a": _c(rng, 4)}),
        "exp_log": (lambda p: ops.sum(ops.exp(p["x"] * 0.3) + ops.log(p["y"]) * W), {"x": r(4), "y": pos(4)}),
        "log1p_sqrt": (lambda p: ops.sum(ops.log1p(p["y"]) * W + ops.sqrt(p["y"])), {"y": pos(4)}),
        "tanh_sigmoid": (lambda p: ops.sum(ops.tanh(p["x"]) * W + ops.sigmoid(p["x"])), {"x": r(4)}),
        "relu_maximum": (lambda p: ops.sum(ops.relu(p["x"]) * W + ops.maximum(p["x"], 0.1)),
                         {"x": np.array([-1.0, 0.5, 1.5, -0.3])}),
        "split_acts": (lambda p: loss_c(ops.split_sigmoid(p["a"]) + ops.split_tanh(p["a"])), {"a": _c(rng, 4)}),
        "log_compress": (lambda p: loss_c(ops.log_compress(p["a"])),
                         {"a": np.concatenate([_c(rng, 3), [1e-5 + 2e-5j]])}),
        "matmul": (lambda p: loss_c(p["a"] @ p["b"]), {"a": _c(rng, 3, 5), "b": _c(rng, 5, 4)}),
        "sum_mean": (lambda p: loss_c(ops.sum(p["a"], axis=0) + ops.mean(p["a"], axis=0)), {"a": _c(rng, 3, 4)}),
        "reshape_transpose": (lambda p: loss_c(ops.reshape(ops.transpose(p["a"]), (3, 4))), {"a": _c(rng, 4, 3)}),
        "getitem": (lambda p: loss_c(p["a"][np.array([0, 2, 2, 1])]), {"a": _c(rng, 3)}),
        "concat_stack": (lambda p: loss_c(ops.concatenate([p["a"], p["b"]]) + ops.stack([p["a"], p["b"]])[0, 0]),
                         {"a": _c(rng, 2), "b": _c(rng, 2)}),
        "rfft": (lambda p: loss_c(ops.rfft(p["x"])[:4]), {"x": r(8)}),
        "irfft": (lambda p: ops.sum(ops.irfft(p["a"], 8) * w8), {"a": _c(rng, 5)}),
        "conv1d": (lambda p: ops.sum(ops.conv1d(p["x"], p["w"], dilation=2) * 0.5),
                   {"x": r(1, 7, 2), "w": r(3, 2, 3)}),
        "softmax": (lambda p: ops.sum(ops.softmax(p["x"]) * W), {"x": r(4)}),
        "gru_cell": (lambda p: loss_c(ops.gru_cell(p["x"], p["h"], p["Wi"], p["Wh"], p["bi"], p["bh"])),
                     {"x": _c(rng, 2, 3), "h": _c(rng, 2, 4), "Wi": 0.5 * _c(rng, 3, 12),
                      "Wh": 0.5 * _c(rng, 4, 12), "bi": 0.3 * _c(rng, 12), "bh": 0.3 * _c(rng, 12)}),
        "layer_norm": (lambda p: ops.sum(kws_mod.layer_norm(p["x"], p["g"], p["b"]) * W),
                       {"x": r(2, 4), "g": r(4), "b": r(4)}),
    }


def composed_case(K: int = 16, B: int = 2, hidden: int = 4, steps: int = 2, seed: int = 0):
    """Two unrolled filter + optimizer steps and the meta-loss, as a function of phi."""
    rng = np.random.default_rng(seed)
    n = K // 2 * (steps + 2)
    u = rng.standard_normal((1, n))
    d = 0.7 * np.roll(u, 1, axis=-1) + 0.05 * rng.standard_normal((1, n))
    batch = SceneBatch.from_arrays(u, d, [0], K, B)
    cfg = metaopt.OptimizerConfig(hidden=hidden, layers=2)
    phi = {k: v.astype(np.complex128) for k, v in metaopt.init_params(cfg, B, rng).items()}
    for k in phi:
        if k.endswith("b") or k.endswith("_ih") or k.endswith("_hh"):
            phi[k] = phi[k] + 0.1 * _c(rng, *phi[k].shape)

    def f(p):
        theta, psi = initial_state(batch, phi)
        e, _, _ = unroll(p, theta, psi, batch.U, batch.D, 1, steps, K)
        return meta_loss(e)

    return f, phi


def gradient_suite(tol: float = 1e-4) -> dict:
    """name -> GradCheckReport."""
    out = {name: check_gradients(f, p, tol=tol) for name, (f, p) in primitive_cases().items()}
    f, phi = composed_case()
    out["unrolled_filter_optimizer_loss"] = check_gradients(f, phi, tol=tol)
    return out


def loss_identities() -> dict:
    """name -> absolute error of each identity."""
    rng = np.random.default_rng(1)
    e = rng.standard_normal(200)
    probs = rng.dirichlet(np.ones(5))
    out = {}
    out["meta_loss_ones"] = abs(float(meta_loss(np.ones(64))) - math.log(1 + 1e-8))
    alpha = 3.7
    big = 10.0 * e  # mean square ~100, far above the loss floor
    out["meta_loss_scaling"] = abs(float(meta_loss(alpha * big)) - float(meta_loss(big)) - 2 * math.log(alpha))
    out["joint_lam0"] = abs(float(joint_loss(e, 2, probs, 0.0)) - float(meta_loss(e)))
    out["joint_lam1"] = abs(float(joint_loss(e, 2, probs, 1.0)) - float(kws_mod.kws_loss(probs, 2)))
    half = 0.5 * float(meta_loss(e)) + 0.5 * float(kws_mod.kws_loss(probs, 2))
    out["joint_half"] = abs(float(joint_loss(e, 2, probs, 0.5)) - half)
    out["bce_uniform_2class"] = abs(float(kws_mod.kws_loss(np.array([0.5, 0.5]), 0)) - math.log(2))
    return out


def run_selfcheck() -> list:
    """[(name, passed, detail)] for the three suites."""
    results = []
    t = time.perf_counter()
    err = overlap_save_error()
    results.append(("overlap-save vs direct convolution", err < 1e-6,
                    f"rel err {err:.1e} ({time.perf_counter() - t:.1f}s)"))
    t = time.perf_counter()
    reports = gradient_suite()
    bad = [k for k, r in reports.items() if not r.passed]
    worst = max(r.max_error for r in reports.values())
    results.append(("gradient suite", not bad,
                    f"{len(reports)} checks, worst rel err {worst:.1e}"
                    + (f", failing: {', '.join(bad)}" if bad else "") + f" ({time.perf_counter() - t:.1f}s)"))
    ids = loss_identities()
    worst = max(ids.values())
    results.append(("loss identities", worst < 1e-9, f"{len(ids)} identities, max abs err {worst:.1e}"))
    return results
