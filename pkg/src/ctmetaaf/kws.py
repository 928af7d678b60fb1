"""Keyword classifier: log-mel input, residual dilated-conv blocks, mean pooling.

Each residual block is ``1x1 conv -> layer norm -> ReLU -> dilated conv (k=5)
-> layer norm -> ReLU -> 1x1 conv`` with dilations 1, 2, 4.  The trunk is
averaged over time and a dense softmax head gives the class distribution.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .dsp import N_MELS
from .errors import ConfigurationError, UsageError

LN_EPS = 1e-5
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class KwsConfig:
    n_classes: int = 35
    width: int = 128
    bottleneck: int = 112
    kernel: int = 5
    dilations: tuple = (1, 2, 4)
    n_mels: int = N_MELS

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigurationError("need at least two classes")
        if self.kernel % 2 == 0:
            raise ConfigurationError("kernel size must be odd")


@dataclass(frozen=True)
class ClassPrediction:
    probs: np.ndarray
    predicted: int


def _dense_init(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape).astype(np.float32)


def init_params(cfg: KwsConfig, rng: np.random.Generator) -> dict:
    W, Bn, k = cfg.width, cfg.bottleneck, cfg.kernel
    p = {
        "in.W": _dense_init(rng, cfg.n_mels, W, (cfg.n_mels, W)),
        "in.b": np.zeros(W, np.float32),
    }
    for i, _ in enumerate(cfg.dilations):
        p[f"b{i}.conv1.W"] = _dense_init(rng, W, Bn, (W, Bn))
        p[f"b{i}.conv1.b"] = np.zeros(Bn, np.float32)
        p[f"b{i}.ln1.g"] = np.ones(Bn, np.float32)
        p[f"b{i}.ln1.b"] = np.zeros(Bn, np.float32)
        p[f"b{i}.dconv.W"] = _dense_init(rng, k * Bn, k * Bn, (k, Bn, Bn))
        p[f"b{i}.dconv.b"] = np.zeros(Bn, np.float32)
        p[f"b{i}.ln2.g"] = np.ones(Bn, np.float32)
        p[f"b{i}.ln2.b"] = np.zeros(Bn, np.float32)
        p[f"b{i}.conv2.W"] = _dense_init(rng, Bn, W, (Bn, W))
        p[f"b{i}.conv2.b"] = np.zeros(W, np.float32)
    p["out.W"] = _dense_init(rng, W, cfg.n_classes, (W, cfg.n_classes))
    p["out.b"] = np.zeros(cfg.n_classes, np.float32)
    # input standardisation, set from training data; not trained
    p["norm.mean"] = np.zeros(cfg.n_mels, np.float32)
    p["norm.std"] = np.ones(cfg.n_mels, np.float32)
    return p


def is_trainable(name: str) -> bool:
    return not name.startswith("norm.")


def param_count(params: dict) -> int:
    """Number of trainable real parameters."""
    return int(sum(np.size(v) for k, v in params.items() if is_trainable(k)))


def config_from_params(params: dict, dilations=(1, 2, 4)) -> KwsConfig:
    k, _, bn = params["b0.dconv.W"].shape
    n_mels, width = params["in.W"].shape
    return KwsConfig(n_classes=params["out.W"].shape[1], width=width, bottleneck=bn,
                     kernel=k, dilations=tuple(dilations), n_mels=n_mels)


def layer_norm(x, g, b):
    mu = ops.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = ops.mean(xc * xc, axis=-1, keepdims=True)
    return xc / ops.sqrt(var + LN_EPS) * g + b


def kws_logits(params: dict, mel, dilations=(1, 2, 4)):
    """Logits for a (T, n_mels) sequence or a (N, T, n_mels) batch."""
    shape = np.shape(mel.value if hasattr(mel, "value") else mel)
    if len(shape) < 2 or shape[-2] == 0:
        raise UsageError("keyword classifier needs at least one frame")
    single = len(shape) == 2
    if single:
        mel = ops.reshape(mel, (1,) + shape)
    x = (mel - params["norm.mean"]) / params["norm.std"]
    x = x @ params["in.W"] + params["in.b"]
    for i, dil in enumerate(dilations):
        h = x @ params[f"b{i}.conv1.W"] + params[f"b{i}.conv1.b"]
        h = ops.relu(layer_norm(h, params[f"b{i}.ln1.g"], params[f"b{i}.ln1.b"]))
        h = ops.conv1d(h, params[f"b{i}.dconv.W"], dilation=dil) + params[f"b{i}.dconv.b"]
        h = ops.relu(layer_norm(h, params[f"b{i}.ln2.g"], params[f"b{i}.ln2.b"]))
        x = x + (h @ params[f"b{i}.conv2.W"] + params[f"b{i}.conv2.b"])
    pooled = ops.mean(x, axis=1)
    logits = pooled @ params["out.W"] + params["out.b"]
    return logits[0] if single else logits


def kws_probs(params: dict, mel, dilations=(1, 2, 4)):
    return ops.softmax(kws_logits(params, mel, dilations), axis=-1)


def kws_forward(params: dict, mel, dilations=(1, 2, 4)) -> ClassPrediction:
    probs = np.asarray(kws_probs(params, np.asarray(mel, dtype=np.float64), dilations))
    if probs.ndim != 1:
        raise UsageError("kws_forward takes one sequence; use kws_probs for batches")
    return ClassPrediction(probs=probs, predicted=int(np.argmax(probs)))


def kws_loss(probs, c):
    """Per-class binary cross-entropy against a one-hot target, averaged over
    classes (and over the batch for (N, C) input)."""
    shape = np.shape(probs.value if hasattr(probs, "value") else probs)
    C = shape[-1]
    c = np.atleast_1d(np.asarray(c))
    if not np.issubdtype(c.dtype, np.integer) or np.any((c < 0) | (c >= C)):
        raise UsageError(f"class labels must be integers in [0, {C})")
    target = np.eye(C)[c].reshape(shape)
    pos = ops.log(ops.maximum(probs, PROB_FLOOR))
    neg = ops.log(ops.maximum(1.0 - probs, PROB_FLOOR))
    per = -(target * pos + (1.0 - target) * neg)
    return ops.mean(per)


def read_vocabulary(path) -> list:
    """Class labels, one per line; the line number is the class index."""
    with open(path, encoding="utf-8") as f:
        labels = [ln.strip() for ln in f if ln.strip()]
    if len(set(labels)) != len(labels):
        raise ConfigurationError(f"{path}: duplicate labels in vocabulary")
    return labels


def write_vocabulary(path, labels) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.writelines(f"{x}\n" for x in labels)
