"""Diagonalised frequency-domain Kalman echo canceller (Diag. KF baseline)."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from .canceller import check_sizes, constrain, frame_spectra, stack_blocks
from .errors import UsageError

EPS = 1e-10
VAR_MIN, VAR_MAX = 1e-10, 1e10
DEFAULT_GRID = {
    "A": (0.95, 0.99, 0.999),
    "q": (1e-4, 1e-3, 1e-2),
    "smoothing": (0.9, 0.99),
}


@dataclass(frozen=True)
class KalmanParams:
    A: float = 0.999
    q: float = 1e-3
    smoothing: float = 0.99
    p_init: float = 1.0

    def __post_init__(self):
        if not 0 < self.A <= 1:
            raise UsageError(f"transition factor must lie in (0, 1], got {self.A}")
        if self.q < 0 or not 0 <= self.smoothing < 1:
            raise UsageError("need q >= 0 and smoothing in [0, 1)")


@dataclass(frozen=True)
class KalmanState:
    w_hat: np.ndarray    # (..., n_bins, B) complex
    P: np.ndarray        # (..., n_bins, B) real
    psi_obs: np.ndarray  # (..., n_bins) real
    A: float
    q: float
    smoothing: float


def init_kalman(K: int, B: int, params: KalmanParams = KalmanParams(), batch: tuple = ()) -> KalmanState:
    check_sizes(K, B)
    nb = K // 2 + 1
    return KalmanState(
        w_hat=np.zeros(batch + (nb, B), complex),
        P=np.full(batch + (nb, B), params.p_init),
        psi_obs=np.zeros(batch + (nb,)),
        A=params.A, q=params.q, smoothing=params.smoothing,
    )


def kf_step(state: KalmanState, u_specs, d_spec, constrained: bool = True):
    """One predict/innovate/update cycle.

    ``u_specs`` holds the last B playback spectra (newest first), ``d_spec``
    the spectrum of the last K mixture samples.  The innovation is the
    transform of the alias-free residual block with the first half zeroed.
    Returns ``(e_spec, new_state)``.
    """
    K = 2 * (u_specs.shape[-2] - 1)
    R = K // 2
    w = state.A * state.w_hat
    P = np.clip(state.A ** 2 * state.P + state.q * np.abs(w) ** 2, VAR_MIN, VAR_MAX)
    y_spec = np.sum(w * u_specs, axis=-1)
    e_time = np.fft.irfft(d_spec - y_spec, n=K, axis=-1)[..., R:]
    e_spec = np.fft.rfft(np.concatenate([np.zeros_like(e_time), e_time], axis=-1), axis=-1)
    u2 = np.abs(u_specs) ** 2
    den = np.sum(u2 * P, axis=-1) + state.psi_obs + EPS
    gain = P * np.conj(u_specs) / den[..., None]
    step = gain * e_spec[..., None]
    if constrained:
        step = constrain(step, K)
    w = w + step
    P = np.clip((1.0 - (gain * u_specs).real) * P, VAR_MIN, VAR_MAX)
    a = state.smoothing
    psi = np.clip(a * state.psi_obs + (1.0 - a) * np.abs(e_spec) ** 2, VAR_MIN, VAR_MAX)
    return e_spec, replace(state, w_hat=w, P=P, psi_obs=psi)


def run_kalman(u, d, K: int, B: int, params: KalmanParams = KalmanParams(),
               return_states: bool = False):
    """Stream whole signals (``(..., N)`` arrays) through the filter; returns the residual."""
    u = np.asarray(u, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    U = stack_blocks(frame_spectra(u, K), B)
    D = frame_spectra(d, K)
    T = D.shape[-2]
    state = init_kalman(K, B, params, batch=d.shape[:-1])
    out = []
    states = []
    for t in range(T):
        e_spec, state = kf_step(state, U[..., t, :, :], D[..., t, :])
        out.append(np.fft.irfft(e_spec, n=K, axis=-1)[..., K // 2:])
        if return_states:
            states.append(state)
    e = np.concatenate(out, axis=-1)[..., :d.shape[-1]]
    return (e, states) if return_states else e


def grid_points(grid: dict) -> list:
    """Grid points in lexicographic order of the sorted values of A, q, smoothing."""
    keys = ("A", "q", "smoothing")
    for k in grid:
        if k not in keys:
            raise UsageError(f"unknown grid key {k!r}")
    values = [sorted(grid.get(k, (getattr(KalmanParams(), k),))) for k in keys]
    if any(len(v) == 0 for v in values):
        raise UsageError("empty tuning grid")
    return [KalmanParams(A=a, q=q, smoothing=s) for a, q, s in itertools.product(*values)]


def grid_search_kf(grid: dict, scenes, evaluate, K: int, B: int):
    """Pick the grid point with the best macro F1 on ``scenes``.

    ``evaluate(residuals, scenes) -> (macro_f1, mean_erle)`` scores one grid
    point.  Ties go to higher ERLE, then to the earlier grid point.  Returns
    ``(best_params, table)`` where ``table`` lists every point's scores.
    """
    points = grid_points(grid)
    scenes = list(scenes)
    if not scenes:
        raise UsageError("grid search needs at least one scene")
    u = np.stack([s.u for s in scenes])
    d = np.stack([s.d for s in scenes])
    table = []
    best, best_key = None, None
    for i, p in enumerate(points):
        e = run_kalman(u, d, K, B, p)
        f1, erle_db = evaluate(e, scenes)
        table.append({"A": p.A, "q": p.q, "smoothing": p.smoothing, "macro_f1": f1, "erle": erle_db})
        key = (f1, erle_db if erle_db is not None else -np.inf, -i)
        if best_key is None or key > best_key:
            best, best_key = p, key
    return best, table
