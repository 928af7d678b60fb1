"""Losses and training loops: KWS pretraining, optimizer meta-training with a
frozen classifier, and joint optimizer + classifier training.

Meta-training unrolls the filter and the learned optimizer over each scene
in truncated windows of random length.  State is carried across windows but
detached.  The classification term is computed once per scene, on the
residual assembled from every window, and its gradient only reaches the
final window.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import kws as kws_mod
from . import metaopt
from .autodiff import Tape, backward, ops
from .canceller import check_sizes, filter_gradient, filter_output, frame_spectra, residual, stack_blocks
from .checkpoint import Checkpoint, config_hash, save_checkpoint
from .dsp import mel_spectrogram
from .errors import CheckpointError, NumericError, UsageError
from .metrics import confusion_matrix, f1_scores
from .scenes import seed_for

log = logging.getLogger(__name__)

LOSS_EPS = 1e-8
MODES = ("kws-pretrain", "meta-frozen", "joint")


# ---------------------------------------------------------------- losses

def meta_loss(e_bar):
    """``ln(mean(e^2) + eps)`` per scene (last axis), averaged over scenes."""
    n = np.shape(e_bar.value if hasattr(e_bar, "value") else e_bar)
    if len(n) == 0 or n[-1] == 0:
        raise UsageError("meta-loss needs a nonempty residual window")
    if not hasattr(e_bar, "value"):
        e_bar = np.asarray(e_bar, dtype=np.float64)
    return ops.mean(ops.log(ops.mean(e_bar * e_bar, axis=-1) + LOSS_EPS))


def joint_loss(e_bar, c, probs, lam: float):
    """``lam * kws_loss + (1 - lam) * meta_loss``; the boundaries are exact."""
    if not 0.0 <= lam <= 1.0:
        raise UsageError(f"loss weight must lie in [0, 1], got {lam}")
    if lam == 0.0:
        return meta_loss(e_bar)
    if lam == 1.0:
        return kws_mod.kws_loss(probs, c)
    return lam * kws_mod.kws_loss(probs, c) + (1.0 - lam) * meta_loss(e_bar)


# ---------------------------------------------------------------- config

@dataclass(frozen=True)
class TrainConfig:
    mode: str = "meta-frozen"
    lam: float = 0.0
    batch_size: int = 16
    lr: float = 2e-4
    beta1: float = 0.99
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 10.0
    lr_patience: int = 10
    stop_patience: int = 30
    max_epochs: int = 100
    L_range: tuple = (8, 32)
    seed: int = 0
    # joint mode: classifier parameter group
    kws_lr: float = 1e-4
    kws_beta1: float = 0.9
    # filter / optimizer geometry
    K: int = 1024
    B: int = 4
    hidden: int = 48
    layers: int = 2
    group_size: int = 5
    group_hop: int = 2
    constrained_grad: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise UsageError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise UsageError(f"loss weight must lie in [0, 1], got {self.lam}")
        lo, hi = self.L_range
        if not 1 <= lo <= hi:
            raise UsageError(f"truncation range {self.L_range} is empty")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise UsageError("batch size must be positive and epoch count non-negative")
        if self.lr < 0 or self.kws_lr < 0:
            raise UsageError("learning rates must be non-negative")

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "TrainConfig":
        """Recipe defaults per mode, then ``overrides``."""
        base = {
            "kws-pretrain": dict(batch_size=128, lr=1e-3, beta1=0.9, max_epochs=50,
                                 lr_patience=10**9, stop_patience=10**9),
            "meta-frozen": dict(batch_size=16, lr=2e-4, beta1=0.99, lr_patience=10, stop_patience=30),
            "joint": dict(batch_size=16, lr=1e-4, beta1=0.99, kws_lr=1e-4, kws_beta1=0.9,
                          lam=0.5, lr_patience=10, stop_patience=50),
        }[mode]
        base.update(overrides)
        return cls(mode=mode, **base)

    def snapshot(self) -> dict:
        d = asdict(self)
        d["L_range"] = list(self.L_range)
        return d


# ---------------------------------------------------------------- Adam

class Adam:
    """Adam over a dict of real or complex arrays.

    Complex parameters keep separate second moments for the real and
    imaginary parts (stored as the real/imag parts of one complex array).
    Parameters and moments are kept in single precision.
    """

    def __init__(self, params: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, names=None):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.names = list(names if names is not None else params)
        self.m = {k: np.zeros_like(params[k]) for k in self.names}
        self.v = {k: np.zeros_like(params[k]) for k in self.names}
        self.t = 0

    def step(self, params: dict, grads: dict, scale: float = 1.0) -> None:
        if self.lr == 0.0:
            return
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for k in self.names:
            g = np.asarray(grads[k]) * scale
            p = params[k]
            m = b1 * self.m[k] + (1.0 - b1) * g
            if np.iscomplexobj(p):
                v = b2 * self.v[k] + (1.0 - b2) * (g.real ** 2 + 1j * g.imag ** 2)
                mh, vh = m / c1, v / c2
                upd = mh.real / (np.sqrt(vh.real) + self.eps) + 1j * mh.imag / (np.sqrt(vh.imag) + self.eps)
            else:
                g = g.real
                m = m.real
                v = b2 * self.v[k] + (1.0 - b2) * g ** 2
                upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[k] = (p - self.lr * upd).astype(p.dtype)
            self.m[k] = m.astype(p.dtype)
            self.v[k] = v.astype(p.dtype)

    def state_arrays(self, prefix: str) -> dict:
        out = {f"{prefix}.m/{k}": v for k, v in self.m.items()}
        out.update({f"{prefix}.v/{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, ckpt: Checkpoint, prefix: str, t: int) -> None:
        for k in self.names:
            self.m[k] = ckpt.arrays[f"{prefix}.m/{k}"].copy()
            self.v[k] = ckpt.arrays[f"{prefix}.v/{k}"].copy()
        self.t = t


def global_norm(*grad_dicts) -> float:
    total = 0.0
    for g in grad_dicts:
        for v in g.values():
            total += float(np.sum(np.abs(v) ** 2))
    return math.sqrt(total)


def clip_scale(norm: float, clip_norm: float) -> float:
    return 1.0 if norm <= clip_norm or norm == 0.0 else clip_norm / norm


# ---------------------------------------------------------------- schedule

@dataclass
class Schedule:
    """Best-score tracking, LR halving and early stopping."""
    lr_patience: int
    stop_patience: int
    best_key: Optional[tuple] = None
    best_epoch: int = -1
    stale: int = 0
    lr_scale: float = 1.0

    def update(self, epoch: int, key: tuple) -> bool:
        """Register a validation score (higher is better); True when improved."""
        if self.best_key is None or key > self.best_key:
            self.best_key, self.best_epoch, self.stale = key, epoch, 0
            return True
        self.stale += 1
        if self.stale % self.lr_patience == 0:
            self.lr_scale *= 0.5
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.stop_patience

    def to_meta(self) -> dict:
        return {"best_key": list(self.best_key) if self.best_key is not None else None,
                "best_epoch": self.best_epoch, "stale": self.stale, "lr_scale": self.lr_scale}

    def load_meta(self, meta: dict) -> None:
        bk = meta.get("best_key")
        self.best_key = tuple(bk) if bk is not None else None
        self.best_epoch = meta["best_epoch"]
        self.stale = meta["stale"]
        self.lr_scale = meta["lr_scale"]


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    history: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)


class RunLog:
    """Line-delimited JSON training records, optionally mirrored to a file."""

    def __init__(self, path=None):
        self.records = []
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def __call__(self, **rec):
        rec = {k: (float(v) if isinstance(v, (np.floating, float)) else v) for k, v in rec.items()}
        self.records.append(rec)
        line = json.dumps(rec, sort_keys=True)
        log.info(line)
        if self.path is not None:
            with self.path.open("a") as f:
                f.write(line + "\n")


def _prefixed(prefix: str, arrays: dict) -> dict:
    return {f"{prefix}/{k}": v for k, v in arrays.items()}


def _cast(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        v = np.asarray(v)
        out[k] = v.astype(np.complex64) if np.iscomplexobj(v) else v.astype(np.float32)
    return out


def _dump(out_dir, arrays: dict, meta: dict, what: str) -> str:
    if out_dir is None:
        return "no output directory configured, state not written"
    path = save_checkpoint(Path(out_dir) / "divergence.ckpt", Checkpoint("divergence", arrays, dict(meta, what=what)))
    return f"state dumped to {path}"


# ---------------------------------------------------------------- signals

def clean_signal(scene) -> np.ndarray:
    """Playback-free classifier input: keyword plus noise."""
    return scene.s + scene.n


def noisy_signal(snr_range, seed: int = 0) -> Callable:
    """Classifier input with white noise added at an SNR drawn per scene from
    ``snr_range`` (dB, relative to the keyword's active power).

    Synthetic keywords sit on digital silence; without a noise floor a
    classifier trained on them breaks on any residual echo.
    """
    lo, hi = snr_range

    def signal(scene) -> np.ndarray:
        x = clean_signal(scene)
        rng = np.random.default_rng(seed_for(seed, scene.id, "kws-noise"))
        power = np.sum(x * x) / max(1, np.count_nonzero(x))
        snr = rng.uniform(lo, hi)
        return x + rng.standard_normal(len(x)) * np.sqrt(power * 10.0 ** (-snr / 10.0))

    return signal


def _stack(signals) -> np.ndarray:
    n = max(len(x) for x in signals)
    out = np.zeros((len(signals), n))
    for i, x in enumerate(signals):
        out[i, :len(x)] = x
    return out


def mel_features(signals) -> np.ndarray:
    return np.asarray(mel_spectrogram(_stack(list(signals))))


def predict_classes(kws_params: dict, mels, batch: int = 64) -> np.ndarray:
    mels = np.asarray(mels)
    out = []
    for i in range(0, len(mels), batch):
        out.append(np.argmax(np.asarray(kws_mod.kws_logits(kws_params, mels[i:i + batch])), axis=-1))
    return np.concatenate(out) if out else np.zeros(0, int)


def macro_f1(kws_params: dict, mels, labels) -> float:
    C = kws_params["out.W"].shape[1]
    pred = predict_classes(kws_params, mels)
    return f1_scores(confusion_matrix(labels, pred, C))[0]


# ---------------------------------------------------------------- KWS pretraining

def train_kws(config: TrainConfig, train_scenes, val_scenes, kws_cfg: kws_mod.KwsConfig | None = None,
              init: dict | None = None, signal: Callable = clean_signal, labels=None,
              out_dir=None, log_path=None, resume: Checkpoint | None = None) -> TrainResult:
    """Train the classifier with Adam on per-class BCE; best-validation macro F1 wins.

    ``signal(scene)`` gives the waveform fed to the classifier (clean
    keyword by default).  ``labels`` overrides the scene labels (used for
    the shuffled-label control).
    """
    train_scenes, val_scenes = list(train_scenes), list(val_scenes)
    if not train_scenes:
        raise UsageError("keyword training set is empty")
    y_tr = np.asarray(labels if labels is not None else [s.c for s in train_scenes], dtype=np.int64)
    y_va = np.asarray([s.c for s in val_scenes], dtype=np.int64)
    x_tr = mel_features(signal(s) for s in train_scenes)
    x_va = mel_features(signal(s) for s in val_scenes) if val_scenes else None

    if init is not None:
        params = {k: v.copy() for k, v in init.items()}
        cfg = kws_mod.config_from_params(params)
    else:
        cfg = kws_cfg or kws_mod.KwsConfig(n_classes=int(max(y_tr.max(), y_va.max() if len(y_va) else 0)) + 1)
        params = kws_mod.init_params(cfg, np.random.default_rng([config.seed, 7]))
        flat = x_tr.reshape(-1, x_tr.shape[-1])
        params["norm.mean"] = flat.mean(axis=0).astype(np.float32)
        params["norm.std"] = np.maximum(flat.std(axis=0), 1e-3).astype(np.float32)
    if int(max(y_tr.max(), y_va.max() if len(y_va) else 0)) >= cfg.n_classes:
        raise UsageError(f"labels exceed the classifier's {cfg.n_classes} classes")
    names = [k for k in params if kws_mod.is_trainable(k)]
    adam = Adam(params, config.lr, config.beta1, config.beta2, config.adam_eps, names)
    sched = Schedule(config.lr_patience, config.stop_patience)
    meta = {"seed": config.seed, "config_hash": config_hash(config.snapshot()), "mode": "kws-pretrain",
            "n_classes": cfg.n_classes, "dilations": list(cfg.dilations)}
    best_params = _cast(params)
    start = 0
    if resume is not None:
        params = {k: v.copy() for k, v in resume.subset("kws/").items()}
        best_params = {k: v.copy() for k, v in resume.subset("best/").items()}
        adam.load_state(resume, "adam", resume.meta["adam_t"])
        sched.load_meta(resume.meta["schedule"])
        start = resume.meta["epoch"] + 1
    runlog = RunLog(log_path)
    epoch = start - 1
    for epoch in range(start, config.max_epochs):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(x_tr))
        adam.lr = config.lr * sched.lr_scale
        losses = []
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            tape = Tape()
            leaves = {k: tape.leaf(params[k], k) for k in names}
            p = dict(params, **leaves)
            loss = kws_mod.kws_loss(kws_mod.kws_probs(p, x_tr[idx], cfg.dilations), y_tr[idx])
            if not np.isfinite(loss.value):
                raise NumericError(f"keyword loss diverged at epoch {epoch}; "
                                   + _dump(out_dir, _prefixed("kws", params), meta, "kws"))
            g = backward(tape, loss)
            grads = {k: g[leaves[k]] for k in names}
            adam.step(params, grads, clip_scale(global_norm(grads), config.clip_norm))
            losses.append(float(loss.value))
        train_loss = float(np.mean(losses))
        if x_va is not None and len(x_va):
            f1 = macro_f1(params, x_va, y_va)
            va_loss = float(kws_mod.kws_loss(kws_mod.kws_probs(params, x_va, cfg.dilations), y_va))
            key = (f1, -va_loss)
        else:
            f1, va_loss, key = None, None, (-train_loss,)
        runlog(epoch=epoch, split="train", loss=train_loss, lr=adam.lr)
        runlog(epoch=epoch, split="val", loss=va_loss, f1=f1, lr=adam.lr)
        if sched.update(epoch, key):
            best_params = _cast(params)
        if sched.should_stop:
            break
    meta.update(epoch=epoch, best_epoch=sched.best_epoch,
                val_score=sched.best_key[0] if sched.best_key else None)
    best = Checkpoint("kws", _prefixed("kws", best_params), dict(meta))
    last_arrays = dict(_prefixed("kws", _cast(params)), **_prefixed("best", best_params), **adam.state_arrays("adam"))
    last = Checkpoint("kws-train-state", last_arrays,
                      dict(meta, adam_t=adam.t, schedule=sched.to_meta()))
    return TrainResult(best, last, runlog.records)


# ---------------------------------------------------------------- meta-training

@dataclass
class SceneBatch:
    """Precomputed spectra for a batch of equally long scenes."""
    U: np.ndarray       # (S, T, n_bins, B)
    D: np.ndarray       # (S, T, n_bins)
    d: np.ndarray       # (S, N)
    c: np.ndarray       # (S,)
    n_samples: int

    @classmethod
    def from_scenes(cls, scenes, K: int, B: int) -> "SceneBatch":
        u = _stack([s.u for s in scenes])
        d = _stack([s.d for s in scenes])
        return cls.from_arrays(u, d, np.array([s.c for s in scenes]), K, B)

    @classmethod
    def from_arrays(cls, u, d, c, K: int, B: int) -> "SceneBatch":
        check_sizes(K, B)
        u = np.atleast_2d(np.asarray(u, dtype=np.float64))
        d = np.atleast_2d(np.asarray(d, dtype=np.float64))
        return cls(stack_blocks(frame_spectra(u, K), B), frame_spectra(d, K), d,
                   np.asarray(c), d.shape[-1])

    @property
    def n_frames(self) -> int:
        return self.D.shape[-2]


def unroll(phi, theta, psi, U, D, t0: int, L: int, K: int, hop: int = 2, constrained: bool = False):
    """Run filter and learned optimizer for frames ``t0 .. t0+L-1``.

    Works on plain arrays (inference) or tape variables (training).  Returns
    ``(residual blocks, theta, psi)``; the residual is (..., L*R).
    """
    es = []
    for t in range(t0, t0 + L):
        u_stack, d_spec = U[..., t, :, :], D[..., t, :]
        y = filter_output(theta, u_stack)
        e_spec, e_time = residual(d_spec, y, K)
        grad = filter_gradient(u_stack, e_spec, K, constrained)
        xi = metaopt.feature_stack(grad, u_stack[..., 0], d_spec, e_spec, y)
        delta, psi = metaopt.optimizer_step(phi, psi, xi, frame=t, hop=hop)
        theta = theta + delta
        es.append(e_time)
    return ops.concatenate(es, axis=-1), theta, psi


def initial_state(batch: SceneBatch, phi: dict, hop: int = 2):
    S, _, nb, B = batch.U.shape
    cfg = metaopt.config_from_params(phi)
    G = metaopt.group_index(nb, cfg.group_size, hop).shape[0]
    return np.zeros((S, nb, B), complex), metaopt.init_hidden((S,), G, cfg)


def meta_residual(phi: dict, batch: SceneBatch, K: int, hop: int = 2, constrained: bool = False) -> np.ndarray:
    """Full-scene residual of the learned canceller, (S, N)."""
    theta, psi = initial_state(batch, phi, hop)
    e, _, _ = unroll(phi, theta, psi, batch.U, batch.D, 0, batch.n_frames, K, hop, constrained)
    return np.asarray(e)[..., :batch.n_samples]


def zero_update_residual(batch: SceneBatch) -> np.ndarray:
    """Residual of a filter that never adapts (theta stays zero): the mixture itself."""
    return batch.d.copy()


def _windows(rng, n_frames: int, L_range) -> list:
    out, t = [], 0
    lo, hi = L_range
    while t < n_frames:
        L = min(int(rng.integers(lo, hi + 1)), n_frames - t)
        out.append((t, L))
        t += L
    return out


def _batches(scenes, order, size):
    return [[scenes[i] for i in order[j:j + size]] for j in range(0, len(order), size)]


def evaluate_meta(phi: dict, scenes, config: TrainConfig, kws_params: dict | None = None,
                  batch_size: int = 32):
    """(mean per-scene meta-loss, macro F1 or None) of the learned canceller."""
    scenes = list(scenes)
    losses, residuals = [], []
    for j in range(0, len(scenes), batch_size):
        batch = SceneBatch.from_scenes(scenes[j:j + batch_size], config.K, config.B)
        e = meta_residual(phi, batch, config.K, config.group_hop, config.constrained_grad)
        losses.extend(np.log(np.mean(e * e, axis=-1) + LOSS_EPS))
        residuals.extend(e)
    f1 = None
    if kws_params is not None:
        f1 = macro_f1(kws_params, mel_features(residuals), [s.c for s in scenes])
    return float(np.mean(losses)), f1


def train_optimizer(config: TrainConfig, train_scenes, val_scenes, kws_params: dict | None = None,
                    init_phi: dict | None = None, init_kws: dict | None = None,
                    out_dir=None, log_path=None, resume: Checkpoint | None = None) -> TrainResult:
    """Meta-train the learned update rule (frozen classifier) or train jointly.

    ``config.mode == "joint"`` also updates the classifier (from ``init_kws``)
    with its own Adam group; a zero learning rate freezes either group.
    """
    train_scenes, val_scenes = list(train_scenes), list(val_scenes)
    if not train_scenes:
        raise UsageError("meta-training set is empty")
    joint = config.mode == "joint"
    if config.mode == "kws-pretrain":
        raise UsageError("use train_kws for classifier pretraining")
    lam = config.lam
    if joint:
        if init_kws is None:
            raise UsageError("joint training needs an initial classifier")
        kws_params = {k: v.copy() for k, v in init_kws.items()}
    if lam > 0 and kws_params is None:
        raise UsageError("a classifier is required when the classification weight is positive")
    if kws_params is not None:
        C = kws_params["out.W"].shape[1]
        bad = [s.c for s in train_scenes + val_scenes if not 0 <= s.c < C]
        if bad:
            raise UsageError(f"scene label {bad[0]} outside the classifier's {C} classes")
    K, B, hop = config.K, config.B, config.group_hop
    check_sizes(K, B)
    ocfg = metaopt.OptimizerConfig(config.hidden, config.layers, config.group_size, hop)
    if init_phi is not None:
        phi = {k: v.copy() for k, v in init_phi.items()}
    else:
        phi = metaopt.init_params(ocfg, B, np.random.default_rng([config.seed, 11]))
    phi_names = list(phi)
    kws_names = [k for k in (kws_params or {}) if kws_mod.is_trainable(k)] if joint else []
    opt_phi = Adam(phi, config.lr, config.beta1, config.beta2, config.adam_eps, phi_names)
    opt_kws = Adam(kws_params, config.kws_lr, config.kws_beta1, config.beta2, config.adam_eps,
                   kws_names) if joint else None
    train_phi = config.lr > 0
    train_kws_group = joint and config.kws_lr > 0
    dil = tuple(kws_mod.config_from_params(kws_params).dilations) if kws_params is not None else ()

    sched = Schedule(config.lr_patience, config.stop_patience)
    meta = {"seed": config.seed, "config_hash": config_hash(config.snapshot()), "mode": config.mode,
            "lam": lam, "K": K, "B": B, "group_hop": hop, "constrained_grad": config.constrained_grad}
    runlog = RunLog(log_path)
    start = 0
    best_phi, best_kws = _cast(phi), _cast(kws_params) if joint else None
    if resume is not None:
        phi = {k: v.copy() for k, v in resume.subset("phi/").items()}
        best_phi = {k: v.copy() for k, v in resume.subset("best_phi/").items()}
        opt_phi.load_state(resume, "adam_phi", resume.meta["adam_phi_t"])
        if joint:
            kws_params = {k: v.copy() for k, v in resume.subset("kws/").items()}
            best_kws = {k: v.copy() for k, v in resume.subset("best_kws/").items()}
            opt_kws.load_state(resume, "adam_kws", resume.meta["adam_kws_t"])
        sched.load_meta(resume.meta["schedule"])
        start = resume.meta["epoch"] + 1

    def validate():
        va_loss, f1 = evaluate_meta(phi, val_scenes, config, kws_params if lam > 0 or joint else None)
        key = (f1, -va_loss) if lam > 0 else (-va_loss,)
        return va_loss, f1, key

    if start == 0 and val_scenes:
        va_loss, f1, _ = validate()
        runlog(epoch=-1, split="val", loss=va_loss, f1=f1, lr=config.lr)

    epoch = start - 1
    for epoch in range(start, config.max_epochs):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(train_scenes))
        opt_phi.lr = config.lr * sched.lr_scale
        if joint:
            opt_kws.lr = config.kws_lr * sched.lr_scale
        losses = []
        for scenes in _batches(train_scenes, order, config.batch_size):
            batch = SceneBatch.from_scenes(scenes, K, B)
            theta, psi = initial_state(batch, phi, hop)
            windows = _windows(rng, batch.n_frames, config.L_range)
            history = []
            try:
                for wi, (t0, L) in enumerate(windows):
                    final = wi == len(windows) - 1
                    with_cls = final and lam > 0
                    if lam == 1.0 and not final:
                        # no gradient reaches this window; advance the state only
                        e, theta, psi = unroll(phi, theta, psi, batch.U, batch.D, t0, L, K, hop,
                                               config.constrained_grad)
                        history.append(np.asarray(e))
                        continue
                    tape = Tape()
                    phi_v = {k: tape.leaf(phi[k], "phi/" + k) for k in phi_names} if train_phi else phi
                    if with_cls and train_kws_group:
                        kws_v = {k: tape.leaf(kws_params[k], "kws/" + k) for k in kws_names}
                        kp = dict(kws_params, **kws_v)
                    else:
                        kws_v, kp = {}, kws_params
                    e, theta_v, psi_v = unroll(phi_v, theta, psi, batch.U, batch.D, t0, L, K, hop,
                                               config.constrained_grad)
                    if with_cls:
                        full = ops.concatenate(history + [e], axis=-1) if history else e
                        full = full[..., :batch.n_samples]
                        probs = kws_mod.kws_probs(kp, mel_spectrogram(full), dil)
                        loss = joint_loss(e, batch.c, probs, lam)
                    else:
                        loss = (1.0 - lam) * meta_loss(e) if lam > 0 else meta_loss(e)
                    lval = float(loss.value if hasattr(loss, "value") else loss)
                    if not np.isfinite(lval):
                        raise NumericError(f"meta-loss diverged at frame {t0}")
                    if hasattr(loss, "value"):
                        g = backward(tape, loss)
                        gp = {k: g[phi_v[k]] for k in phi_names} if train_phi else {}
                        gk = {k: g[kws_v[k]] for k in kws_names} if kws_v else {}
                        scale = clip_scale(global_norm(gp, gk), config.clip_norm)
                        if gp:
                            opt_phi.step(phi, gp, scale)
                        if gk:
                            opt_kws.step(kws_params, gk, scale)
                    losses.append(lval)
                    theta = np.asarray(theta_v.value if hasattr(theta_v, "value") else theta_v)
                    psi = [np.asarray(p.value if hasattr(p, "value") else p) for p in psi_v]
                    history.append(np.asarray(e.value if hasattr(e, "value") else e))
            except NumericError as exc:
                raise NumericError(f"{exc} (epoch {epoch}); "
                                   + _dump(out_dir, _prefixed("phi", phi), meta, "meta")) from exc
        train_loss = float(np.mean(losses)) if losses else float("nan")
        runlog(epoch=epoch, split="train", loss=train_loss, lr=opt_phi.lr)
        if val_scenes:
            va_loss, f1, key = validate()
            runlog(epoch=epoch, split="val", loss=va_loss, f1=f1, lr=opt_phi.lr)
        else:
            key = (-train_loss,)
        if sched.update(epoch, key):
            best_phi = _cast(phi)
            if joint:
                best_kws = _cast(kws_params)
        if sched.should_stop:
            break

    score = sched.best_key[0] if sched.best_key else None
    meta.update(epoch=epoch, best_epoch=sched.best_epoch, val_score=score)
    best = Checkpoint("meta-optimizer", _prefixed("phi", best_phi), dict(meta))
    last_arrays = dict(_prefixed("phi", _cast(phi)), **_prefixed("best_phi", best_phi),
                       **opt_phi.state_arrays("adam_phi"))
    last_meta = dict(meta, adam_phi_t=opt_phi.t, schedule=sched.to_meta())
    extra = {}
    if joint:
        kmeta = {"seed": config.seed, "config_hash": meta["config_hash"], "mode": "joint",
                 "n_classes": kws_params["out.W"].shape[1], "dilations": list(dil),
                 "epoch": epoch, "best_epoch": sched.best_epoch, "val_score": score}
        extra["kws_best"] = Checkpoint("kws", _prefixed("kws", best_kws), kmeta)
        last_arrays.update(_prefixed("kws", _cast(kws_params)), **_prefixed("best_kws", best_kws),
                           **opt_kws.state_arrays("adam_kws"))
        last_meta["adam_kws_t"] = opt_kws.t
    last = Checkpoint("meta-train-state", last_arrays, last_meta)
    return TrainResult(best, last, runlog.records, extra)


def train_joint(config: TrainConfig, train_scenes, val_scenes, init_phi: dict, init_kws: dict,
                out_dir=None, log_path=None, resume: Checkpoint | None = None):
    """Joint training; returns ``(optimizer checkpoint, classifier checkpoint, result)``."""
    if init_phi is None or init_kws is None:
        raise UsageError("joint training needs both an initial optimizer and classifier")
    if config.mode != "joint":
        config = replace(config, mode="joint")
    res = train_optimizer(config, train_scenes, val_scenes, init_phi=init_phi, init_kws=init_kws,
                          out_dir=out_dir, log_path=log_path, resume=resume)
    return res.best, res.extra["kws_best"], res


def phi_from_checkpoint(ckpt: Checkpoint) -> dict:
    if ckpt.kind != "meta-optimizer":
        raise CheckpointError(f"expected a meta-optimizer checkpoint, found {ckpt.kind!r}")
    return ckpt.subset("phi/")


def kws_from_checkpoint(ckpt: Checkpoint) -> dict:
    if ckpt.kind != "kws":
        raise CheckpointError(f"expected a kws checkpoint, found {ckpt.kind!r}")
    return ckpt.subset("kws/")
