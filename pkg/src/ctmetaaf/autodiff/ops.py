"""Differentiable primitives.

Every function accepts numpy arrays, Python scalars or ``Var`` objects.  With
no ``Var`` among the inputs the plain numpy result is returned.
"""
from __future__ import annotations

import numpy as np

from .tape import Var


def _val(x):
    return x.value if isinstance(x, Var) else x


def _tape(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _is_real(x) -> bool:
    return not np.iscomplexobj(x)


def _fit(g, like):
    """Reduce a broadcast adjoint back to the shape (and realness) of ``like``."""
    shape = np.shape(like)
    if g.shape != shape:
        extra = g.ndim - len(shape)
        if extra > 0:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
    if _is_real(like) and np.iscomplexobj(g):
        g = g.real
    return g


# -- arithmetic ---------------------------------------------------------------

def add(a, b):
    av, bv = _val(a), _val(b)
    out = av + bv
    t = _tape(a, b)
    if t is None:
        return out

    def vjp(g, needs):
        return (_fit(g, av) if needs[0] else None, _fit(g, bv) if needs[1] else None)

    return t.record("add", out, (a, b), vjp)


def sub(a, b):
    av, bv = _val(a), _val(b)
    out = av - bv
    t = _tape(a, b)
    if t is None:
        return out

    def vjp(g, needs):
        return (_fit(g, av) if needs[0] else None, _fit(-g, bv) if needs[1] else None)

    return t.record("sub", out, (a, b), vjp)


def mul(a, b):
    av, bv = _val(a), _val(b)
    out = av * bv
    t = _tape(a, b)
    if t is None:
        return out

    def vjp(g, needs):
        ga = _fit(g * np.conj(bv), av) if needs[0] else None
        gb = _fit(g * np.conj(av), bv) if needs[1] else None
        return ga, gb

    return t.record("mul", out, (a, b), vjp)


def div(a, b):
    av, bv = _val(a), _val(b)
    out = av / bv
    t = _tape(a, b)
    if t is None:
        return out

    def vjp(g, needs):
        ga = _fit(g / np.conj(bv), av) if needs[0] else None
        gb = _fit(-g * np.conj(out / bv), bv) if needs[1] else None
        return ga, gb

    return t.record("div", out, (a, b), vjp)


def neg(a):
    av = _val(a)
    out = -av
    t = _tape(a)
    if t is None:
        return out
    return t.record("neg", out, (a,), lambda g, needs: (-g,))


def conj(a):
    av = _val(a)
    out = np.conj(av)
    t = _tape(a)
    if t is None:
        return out
    return t.record("conj", out, (a,), lambda g, needs: (_fit(np.conj(g), av),))


def real(a):
    av = _val(a)
    out = np.real(av)
    t = _tape(a)
    if t is None:
        return out
    return t.record("real", out, (a,), lambda g, needs: (_fit(g + 0j, av),))


def imag(a):
    av = _val(a)
    out = np.imag(av)
    t = _tape(a)
    if t is None:
        return out
    return t.record("imag", out, (a,), lambda g, needs: (1j * g,))


def make_complex(re, im):
    rv, iv = _val(re), _val(im)
    out = rv + 1j * iv
    t = _tape(re, im)
    if t is None:
        return out

    def vjp(g, needs):
        return (_fit(g.real, rv) if needs[0] else None, _fit(g.imag, iv) if needs[1] else None)

    return t.record("complex", out, (re, im), vjp)


# -- pointwise nonlinearities -------------------------------------------------

def abs(a):  # noqa: A001 - mirrors numpy naming
    av = _val(a)
    out = np.abs(av)
    t = _tape(a)
    if t is None:
        return out

    def vjp(g, needs):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * av / safe, 0.0),)

    return t.record("abs", out, (a,), vjp)


def abs2(a):
    """Squared magnitude ``|a|**2`` (real output)."""
    av = _val(a)
    out = (av * np.conj(av)).real if np.iscomplexobj(av) else av * av
    t = _tape(a)
    if t is None:
        return out
    return t.record("abs2", out, (a,), lambda g, needs: (2.0 * g * av,))


def exp(a):
    av = _val(a)
    out = np.exp(av)
    t = _tape(a)
    if t is None:
        return out
    return t.record("exp", out, (a,), lambda g, needs: (g * np.conj(out),))


def log(a):
    av = _val(a)
    out = np.log(av)
    t = _tape(a)
    if t is None:
        return out
    return t.record("log", out, (a,), lambda g, needs: (g / np.conj(av),))


def log1p(a):
    av = _val(a)
    out = np.log1p(av)
    t = _tape(a)
    if t is None:
        return out
    return t.record("log1p", out, (a,), lambda g, needs: (g / np.conj(1.0 + av),))


def sqrt(a):
    av = _val(a)
    out = np.sqrt(av)
    t = _tape(a)
    if t is None:
        return out
    return t.record("sqrt", out, (a,), lambda g, needs: (g * 0.5 / out,))


def tanh(a):
    av = _val(a)
    out = np.tanh(av)
    t = _tape(a)
    if t is None:
        return out
    return t.record("tanh", out, (a,), lambda g, needs: (g * (1.0 - out * out),))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    av = _val(a)
    out = _sigmoid(av)
    t = _tape(a)
    if t is None:
        return out
    return t.record("sigmoid", out, (a,), lambda g, needs: (g * out * (1.0 - out),))


def relu(a):
    av = _val(a)
    out = np.maximum(av, 0.0)
    t = _tape(a)
    if t is None:
        return out
    return t.record("relu", out, (a,), lambda g, needs: (g * (av > 0),))


def maximum(a, floor: float):
    """``max(a, floor)`` against a constant floor."""
    av = _val(a)
    out = np.maximum(av, floor)
    t = _tape(a)
    if t is None:
        return out
    return t.record("maximum", out, (a,), lambda g, needs: (g * (av > floor),))


def split_sigmoid(a):
    """Sigmoid applied to real and imaginary parts independently."""
    av = _val(a)
    sr, si = _sigmoid(av.real), _sigmoid(av.imag)
    out = sr + 1j * si
    t = _tape(a)
    if t is None:
        return out

    def vjp(g, needs):
        return (g.real * sr * (1.0 - sr) + 1j * (g.imag * si * (1.0 - si)),)

    return t.record("split_sigmoid", out, (a,), vjp)


def split_tanh(a):
    """tanh applied to real and imaginary parts independently."""
    av = _val(a)
    tr, ti = np.tanh(av.real), np.tanh(av.imag)
    out = tr + 1j * ti
    t = _tape(a)
    if t is None:
        return out

    def vjp(g, needs):
        return (g.real * (1.0 - tr * tr) + 1j * (g.imag * (1.0 - ti * ti)),)

    return t.record("split_tanh", out, (a,), vjp)


def log_compress(a):
    """Map ``z`` to ``ln(1 + |z|) * exp(1j * angle(z))``; zero stays zero."""
    av = _val(a)
    r = np.abs(av)
    small = r < 1e-4
    rs = np.where(small, 1.0, r)
    # h(r) = ln(1+r)/r and its derivative, with series near the origin
    h = np.where(small, 1.0 - r / 2 + r * r / 3, np.log1p(r) / rs)
    out = h * av
    t = _tape(a)
    if t is None:
        return out

    def vjp(g, needs):
        dh = np.where(small, -0.5 + 2.0 * r / 3, (r / (1.0 + r) - np.log1p(r)) / (rs * rs))
        # df/dx = h + h'(r) x/r z ;  df/dy = 1j h + h'(r) y/r z
        rn = np.where(r > 0, r, 1.0)
        unit_x = av.real / rn
        unit_y = av.imag / rn
        gc = np.conj(g)
        gx = (gc * (h + dh * unit_x * av)).real
        gy = (gc * (1j * h + dh * unit_y * av)).real
        return (gx + 1j * gy,)

    return t.record("log_compress", out, (a,), vjp)


# -- linear algebra and reductions ---------------------------------------------

def matmul(a, b):
    av, bv = _val(a), _val(b)
    out = av @ bv
    t = _tape(a, b)
    if t is None:
        return out

    def vjp(g, needs):
        ga = gb = None
        if needs[0]:
            if bv.ndim == 1:
                ga = np.multiply.outer(g, np.conj(bv)) if av.ndim > 1 else g * np.conj(bv)
            else:
                ga = g @ np.conj(np.swapaxes(bv, -1, -2)) if av.ndim > 1 else (
                    np.conj(bv) @ g)
            ga = _fit(ga, av)
        if needs[1]:
            if av.ndim == 1:
                gb = np.multiply.outer(np.conj(av), g) if bv.ndim > 1 else g * np.conj(av)
            else:
                gb = np.conj(np.swapaxes(av, -1, -2)) @ g if bv.ndim > 1 else (
                    np.swapaxes(np.conj(av), -1, -2) @ g)
            gb = _fit(gb, bv)
        return ga, gb

    return t.record("matmul", out, (a, b), vjp)


def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False):  # noqa: A001
    av = _val(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)
    t = _tape(a)
    if t is None:
        return out
    shape = av.shape

    def vjp(g, needs):
        return (np.array(_expand(g, shape, axis, keepdims)),)

    return t.record("sum", np.asarray(out), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    av = _val(a)
    out = np.mean(av, axis=axis, keepdims=keepdims)
    t = _tape(a)
    if t is None:
        return out
    shape = av.shape
    n = av.size / np.size(out)

    def vjp(g, needs):
        return (np.array(_expand(g, shape, axis, keepdims)) / n,)

    return t.record("mean", np.asarray(out), (a,), vjp)


# -- shape manipulation -------------------------------------------------------

def reshape(a, shape):
    av = _val(a)
    out = np.reshape(av, shape)
    t = _tape(a)
    if t is None:
        return out
    orig = av.shape
    return t.record("reshape", out, (a,), lambda g, needs: (np.reshape(g, orig),))


def transpose(a, axes=None):
    av = _val(a)
    out = np.transpose(av, axes)
    t = _tape(a)
    if t is None:
        return out
    inv = None if axes is None else np.argsort(axes)
    return t.record("transpose", out, (a,), lambda g, needs: (np.transpose(g, inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(i is None or i is Ellipsis or isinstance(i, (int, np.integer, slice)) for i in items)


def getitem(a, idx):
    av = _val(a)
    out = av[idx]
    t = _tape(a)
    if t is None:
        return out
    basic = _is_basic_index(idx)

    def vjp(g, needs):
        z = np.zeros(av.shape, dtype=np.result_type(av.dtype, g.dtype))
        if basic:
            z[idx] += g
        else:
            np.add.at(z, idx, g)
        return (_fit(z, av),)

    return t.record("getitem", np.asarray(out), (a,), vjp)


def concatenate(xs, axis=0):
    vals = [_val(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    t = _tape(*xs)
    if t is None:
        return out
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g, needs):
        parts = np.split(g, bounds, axis=axis)
        return tuple(_fit(p, v) if n else None for p, v, n in zip(parts, vals, needs))

    return t.record("concatenate", out, tuple(xs), vjp)


def stack(xs, axis=0):
    vals = [_val(x) for x in xs]
    out = np.stack(vals, axis=axis)
    t = _tape(*xs)
    if t is None:
        return out

    def vjp(g, needs):
        return tuple(_fit(np.take(g, i, axis=axis), v) if n else None
                     for i, (v, n) in enumerate(zip(vals, needs)))

    return t.record("stack", out, tuple(xs), vjp)


# -- spectral -----------------------------------------------------------------

def rfft(a):
    """Real DFT along the last axis (even length)."""
    av = _val(a)
    n = av.shape[-1]
    out = np.fft.rfft(av, axis=-1)
    t = _tape(a)
    if t is None:
        return out
    w = np.full(n // 2 + 1, 0.5)
    w[0] = 1.0
    if n % 2 == 0:
        w[-1] = 1.0

    def vjp(g, needs):
        return (np.fft.irfft(g * w, n=n, axis=-1) * n,)

    return t.record("rfft", out, (a,), vjp)


def irfft(a, n: int):
    """Inverse of ``rfft`` for length-``n`` real output."""
    av = _val(a)
    out = np.fft.irfft(av, n=n, axis=-1)
    t = _tape(a)
    if t is None:
        return out
    w = np.full(n // 2 + 1, 2.0 / n)
    w[0] = 1.0 / n
    if n % 2 == 0:
        w[-1] = 1.0 / n

    def vjp(g, needs):
        return (np.fft.rfft(g, axis=-1) * w,)

    return t.record("irfft", out, (a,), vjp)


# -- network layers -----------------------------------------------------------

def conv1d(x, w, dilation: int = 1):
    """Dilated temporal convolution with symmetric zero padding.

    ``x`` is (N, T, Cin), ``w`` is (k, Cin, Cout) with odd k; output (N, T, Cout).
    """
    xv, wv = _val(x), _val(w)
    k = wv.shape[0]
    pad = dilation * (k - 1) // 2
    T = xv.shape[1]
    xp = np.pad(xv, ((0, 0), (pad, pad), (0, 0)))
    out = xp[:, 0:T] @ wv[0]
    for j in range(1, k):
        o = j * dilation
        out = out + xp[:, o:o + T] @ wv[j]
    t = _tape(x, w)
    if t is None:
        return out

    def vjp(g, needs):
        gx = gw = None
        if needs[0]:
            gxp = np.zeros_like(xp)
            for j in range(k):
                o = j * dilation
                gxp[:, o:o + T] += g @ wv[j].T
            gx = gxp[:, pad:pad + T]
        if needs[1]:
            g2 = g.reshape(-1, g.shape[-1])
            gw = np.stack([
                xp[:, j * dilation:j * dilation + T].reshape(-1, xv.shape[-1]).T @ g2
                for j in range(k)])
        return gx, gw

    return t.record("conv1d", out, (x, w), vjp)


def softmax(a, axis=-1):
    av = _val(a)
    z = av - np.max(av, axis=axis, keepdims=True)
    ez = np.exp(z)
    out = ez / np.sum(ez, axis=axis, keepdims=True)
    t = _tape(a)
    if t is None:
        return out

    def vjp(g, needs):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return t.record("softmax", out, (a,), vjp)


def _flat_outer(a, g):
    """Sum over leading axes of ``conj(a)^T g`` for (..., m) and (..., n)."""
    return np.conj(a.reshape(-1, a.shape[-1])).T @ g.reshape(-1, g.shape[-1])


def gru_cell(x, h, W_ih, W_hh, b_ih, b_hh):
    """Complex GRU cell with split sigmoid/tanh gates, as one tape node.

    ``r, z = ssig(x W_r + h U_r)``, ``n = stanh(x W_n + r * (h U_n))``,
    output ``n + z * (h - n)``; gate blocks are ordered [r, z, n].
    """
    xv, hv, Wi, Wh, bi, bh = (_val(v) for v in (x, h, W_ih, W_hh, b_ih, b_hh))
    H = Wh.shape[0]
    gx = xv @ Wi + bi
    gh = hv @ Wh + bh
    a = gx[..., :2 * H] + gh[..., :2 * H]
    sr, si = _sigmoid(a.real), _sigmoid(a.imag)
    rz = sr + 1j * si
    r, z = rz[..., :H], rz[..., H:]
    c = gx[..., 2 * H:] + r * gh[..., 2 * H:]
    tr, ti = np.tanh(c.real), np.tanh(c.imag)
    n = tr + 1j * ti
    out = n + z * (hv - n)
    t = _tape(x, h, W_ih, W_hh, b_ih, b_hh)
    if t is None:
        return out

    def vjp(g, needs):
        g_n = g * (1.0 - np.conj(z))
        g_z = g * np.conj(hv - n)
        g_c = g_n.real * (1.0 - tr * tr) + 1j * (g_n.imag * (1.0 - ti * ti))
        g_r = g_c * np.conj(gh[..., 2 * H:])
        g_rz = np.concatenate([g_r, g_z], axis=-1)
        g_a = g_rz.real * sr * (1.0 - sr) + 1j * (g_rz.imag * si * (1.0 - si))
        g_gx = np.concatenate([g_a, g_c], axis=-1)
        g_gh = np.concatenate([g_a, g_c * np.conj(r)], axis=-1)
        lead = g_gx.ndim - 1
        return (
            _fit(g_gx @ np.conj(Wi).T, xv) if needs[0] else None,
            _fit(g * np.conj(z) + g_gh @ np.conj(Wh).T, hv) if needs[1] else None,
            _fit(_flat_outer(np.broadcast_to(xv, g_gx.shape[:-1] + xv.shape[-1:]), g_gx), Wi) if needs[2] else None,
            _fit(_flat_outer(np.broadcast_to(hv, g_gh.shape[:-1] + hv.shape[-1:]), g_gh), Wh) if needs[3] else None,
            _fit(g_gx.sum(axis=tuple(range(lead))), bi) if needs[4] else None,
            _fit(g_gh.sum(axis=tuple(range(lead))), bh) if needs[5] else None,
        )

    return t.record("gru_cell", out, (x, h, W_ih, W_hh, b_ih, b_hh), vjp)
