"""Learned per-frequency update rule.

Frequencies are cut into overlapping groups (size 5, hop 2 by default).  Each
group's log-compressed feature stack ``[grad, u, d, e, y]`` goes through a
shared complex input projection and a stack of complex GRU layers with
split (real/imag) activations; a complex output projection gives one update
per bin of the group.  Overlapping group outputs are averaged per bin and
the per-bin update is spread over the filter blocks by a learned complex
gain per block.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import ops
from .errors import ConfigurationError, NumericError

N_SIGNALS = 5


@dataclass(frozen=True)
class OptimizerConfig:
    hidden: int = 48
    layers: int = 2
    group_size: int = 5
    group_hop: int = 2

    def __post_init__(self):
        if self.hidden <= 0 or self.layers <= 0:
            raise ConfigurationError("hidden size and layer count must be positive")
        if self.group_size <= 0 or not 0 < self.group_hop <= self.group_size:
            raise ConfigurationError("need group_size > 0 and 0 < group_hop <= group_size")


def group_starts(n_bins: int, size: int = 5, hop: int = 2) -> np.ndarray:
    """Start bins of the overlapping groups; the last group is clamped to end at ``n_bins``."""
    if n_bins < size:
        raise ConfigurationError(f"{n_bins} bins cannot hold a group of {size}")
    starts = list(range(0, n_bins - size + 1, hop))
    if starts[-1] + size < n_bins:
        starts.append(n_bins - size)
    return np.array(starts)


@lru_cache(maxsize=16)
def _group_layout(n_bins, size, hop):
    starts = group_starts(n_bins, size, hop)
    index = starts[:, None] + np.arange(size)
    counts = np.bincount(index.ravel(), minlength=n_bins)
    avg = np.zeros((index.size, n_bins))
    avg[np.arange(index.size), index.ravel()] = 1.0 / counts[index.ravel()]
    index.setflags(write=False)
    avg.setflags(write=False)
    return index, avg


def group_index(n_bins: int, size: int = 5, hop: int = 2) -> np.ndarray:
    return _group_layout(n_bins, size, hop)[0]


def overlap_average_matrix(n_bins: int, size: int = 5, hop: int = 2) -> np.ndarray:
    """(groups*size, n_bins) matrix averaging overlapped group outputs per bin."""
    return _group_layout(n_bins, size, hop)[1]


def _glorot(rng, fan_in, fan_out, shape):
    std = np.sqrt(1.0 / (fan_in + fan_out))  # var 1/(2 fan_avg) per part
    return (rng.normal(0.0, std, shape) + 1j * rng.normal(0.0, std, shape)).astype(np.complex64)


def init_params(cfg: OptimizerConfig, B: int, rng: np.random.Generator) -> dict:
    H, S = cfg.hidden, cfg.group_size
    n_in = N_SIGNALS * S
    p = {
        "in.W": _glorot(rng, n_in, H, (n_in, H)),
        "in.b": np.zeros(H, np.complex64),
    }
    for layer in range(cfg.layers):
        p[f"gru{layer}.W_ih"] = np.concatenate(
            [_glorot(rng, H, H, (H, H)) for _ in range(3)], axis=1)
        p[f"gru{layer}.W_hh"] = np.concatenate(
            [_glorot(rng, H, H, (H, H)) for _ in range(3)], axis=1)
        p[f"gru{layer}.b_ih"] = np.zeros(3 * H, np.complex64)
        p[f"gru{layer}.b_hh"] = np.zeros(3 * H, np.complex64)
    p["out.W"] = _glorot(rng, H, S, (H, S))
    p["out.b"] = np.zeros(S, np.complex64)
    p["block_gain"] = np.ones(B, np.complex64)
    return p


def config_from_params(params: dict) -> OptimizerConfig:
    H = params["in.W"].shape[1]
    layers = sum(1 for k in params if k.endswith(".W_ih"))
    size = params["out.W"].shape[1]
    return OptimizerConfig(hidden=H, layers=layers, group_size=size)


def param_count(params: dict) -> int:
    """Number of complex parameters."""
    return int(sum(np.size(v) for v in params.values()))


def init_hidden(batch_shape: tuple, n_groups: int, cfg: OptimizerConfig) -> list:
    return [np.zeros(tuple(batch_shape) + (n_groups, cfg.hidden), complex) for _ in range(cfg.layers)]


def compress_features(xi):
    """Magnitude-compress, phase-preserve: ``ln(1+|z|) * exp(1j*angle(z))``."""
    return ops.log_compress(xi)


def feature_stack(grad, u_spec, d_spec, e_spec, y_spec):
    """(..., n_bins, 5) stack of [grad averaged over blocks, u, d, e, y]."""
    g = ops.mean(grad, axis=-1)
    return ops.stack([g, u_spec, d_spec, e_spec, y_spec], axis=-1)


def gru_cell(x, h, W_ih, W_hh, b_ih, b_hh):
    """Complex GRU cell with split activations (one fused tape node)."""
    return ops.gru_cell(x, h, W_ih, W_hh, b_ih, b_hh)


def _check_finite(xi, frame):
    v = xi.value if hasattr(xi, "value") else np.asarray(xi)
    if np.all(np.isfinite(v)):
        return
    bad = np.argwhere(~np.isfinite(v))[0]
    stream = tuple(int(i) for i in bad[:-2]) if v.ndim > 2 else ()
    where = f"stream {stream[0] if len(stream) == 1 else stream}" if stream else "stream 0"
    raise NumericError(f"non-finite optimizer input in {where} at frame {frame}")


def optimizer_step(params: dict, psi: list, xi, frame: int | None = None, hop: int = 2):
    """One learned update.

    ``xi`` is the raw (uncompressed) feature stack (..., n_bins, 5); ``psi`` is
    the list of per-layer hidden states (..., groups, H).  Returns the filter
    update (..., n_bins, B) and the new hidden states.
    """
    _check_finite(xi, frame)
    size = params["out.W"].shape[1]
    shape = np.shape(xi.value if hasattr(xi, "value") else xi)
    lead, n_bins = shape[:-2], shape[-2]
    index = group_index(n_bins, size, hop)
    G = index.shape[0]
    feats = compress_features(xi)
    x = ops.reshape(feats[(Ellipsis, index, slice(None))], lead + (G, size * N_SIGNALS))
    x = x @ params["in.W"] + params["in.b"]
    new_psi = []
    for layer, h in enumerate(psi):
        x = gru_cell(x, h, params[f"gru{layer}.W_ih"], params[f"gru{layer}.W_hh"],
                     params[f"gru{layer}.b_ih"], params[f"gru{layer}.b_hh"])
        new_psi.append(x)
    out = x @ params["out.W"] + params["out.b"]
    per_bin = ops.reshape(out, lead + (G * size,)) @ overlap_average_matrix(n_bins, size, hop)
    delta = ops.reshape(per_bin, lead + (n_bins, 1)) * params["block_gain"]
    return delta, new_psi
