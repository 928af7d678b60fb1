"""scikit-learn style wrappers.

Signals are passed as arrays: keyword waveforms ``(n, N)`` for the
classifier, and ``(n, 2, N)`` stacks of ``[playback, mixture]`` for the
echo cancellers, whose ``transform`` returns the ``(n, N)`` residual.
"""
from __future__ import annotations

from types import SimpleNamespace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import kalman
from . import kws as kws_mod
from .errors import UsageError
from .training import (SceneBatch, TrainConfig, clean_signal, mel_features, meta_residual, noisy_signal,
                       phi_from_checkpoint, train_kws, train_optimizer)


def check_waveforms(X) -> np.ndarray:
    X = check_array(X, dtype=np.float64, ensure_all_finite=True)
    return X


def check_signal_pairs(X) -> np.ndarray:
    """Validate an ``(n, 2, N)`` playback/mixture stack."""
    X = check_array(X, dtype=np.float64, allow_nd=True, ensure_all_finite=True)
    if X.ndim != 3 or X.shape[1] != 2:
        raise UsageError(f"expected an (n_scenes, 2, n_samples) array, got shape {X.shape}")
    return X


def _pseudo_scenes(signals=None, pairs=None, labels=None):
    n = len(signals) if signals is not None else len(pairs)
    labels = np.zeros(n, int) if labels is None else labels
    out = []
    for i in range(n):
        if pairs is not None:
            out.append(SimpleNamespace(u=pairs[i, 0], d=pairs[i, 1], c=int(labels[i]), id=str(i)))
        else:
            out.append(SimpleNamespace(s=signals[i], n=0.0, c=int(labels[i]), id=str(i)))
    return out


def _split(n, fraction, seed):
    idx = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * fraction))
    return idx[n_val:], idx[:n_val]


class KWSClassifier(ClassifierMixin, BaseEstimator):
    """Dilated residual keyword classifier on 40 log-mel bands."""

    def __init__(self, width=128, bottleneck=112, kernel=5, lr=1e-3, batch_size=128,
                 epochs=50, noise_snr=(0.0, 40.0), validation_fraction=0.1, seed=0):
        self.width = width
        self.bottleneck = bottleneck
        self.kernel = kernel
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.noise_snr = noise_snr
        self.validation_fraction = validation_fraction
        self.seed = seed

    def fit(self, X, y):
        X = check_waveforms(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise UsageError("X and y have different lengths")
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise UsageError("need at least two classes")
        tr, va = _split(len(X), self.validation_fraction, self.seed) if len(X) > 1 else (np.arange(1), [])
        cfg = kws_mod.KwsConfig(n_classes=len(self.classes_), width=self.width,
                                bottleneck=self.bottleneck, kernel=self.kernel)
        tc = TrainConfig.for_mode("kws-pretrain", lr=self.lr, batch_size=self.batch_size,
                                  max_epochs=self.epochs, seed=self.seed)
        signal = noisy_signal(self.noise_snr, self.seed) if self.noise_snr else clean_signal
        res = train_kws(tc, _pseudo_scenes(X[tr], labels=codes[tr]),
                        _pseudo_scenes(X[va], labels=codes[va]) if len(va) else [], cfg, signal=signal)
        self.params_ = res.best.subset("kws/")
        self.checkpoint_ = res.best
        self.history_ = res.history
        self.n_features_in_ = X.shape[1]
        return self

    def _mels(self, X):
        check_is_fitted(self, "params_")
        return mel_features(check_waveforms(X))

    def predict_proba(self, X):
        probs = kws_mod.kws_probs(self.params_, self._mels(X))
        return np.asarray(probs)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=-1)]


class MetaAEC(TransformerMixin, BaseEstimator):
    """Echo canceller with a learned update rule, meta-trained on signal pairs.

    With ``lam > 0`` a fitted :class:`KWSClassifier` must be given as
    ``classifier`` and ``fit`` needs keyword labels ``y``.
    """

    def __init__(self, K=1024, B=4, hidden=48, layers=2, group_size=5, group_hop=2, lam=0.0,
                 classifier=None, lr=2e-4, batch_size=16, max_epochs=100, L_min=8, L_max=32,
                 validation_fraction=0.1, seed=0):
        self.K = K
        self.B = B
        self.hidden = hidden
        self.layers = layers
        self.group_size = group_size
        self.group_hop = group_hop
        self.lam = lam
        self.classifier = classifier
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.L_min = L_min
        self.L_max = L_max
        self.validation_fraction = validation_fraction
        self.seed = seed

    def fit(self, X, y=None):
        X = check_signal_pairs(X)
        kws_params, labels = None, None
        if self.lam > 0:
            if self.classifier is None or y is None:
                raise UsageError("a fitted classifier and labels are needed when lam > 0")
            check_is_fitted(self.classifier, "params_")
            kws_params = self.classifier.params_
            labels = np.searchsorted(self.classifier.classes_, np.asarray(y))
        tc = TrainConfig.for_mode(
            "meta-frozen", lam=self.lam, lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
            L_range=(self.L_min, self.L_max), seed=self.seed, K=self.K, B=self.B, hidden=self.hidden,
            layers=self.layers, group_size=self.group_size, group_hop=self.group_hop)
        scenes = _pseudo_scenes(pairs=X, labels=labels)
        tr, va = _split(len(X), self.validation_fraction, self.seed) if len(X) > 1 else (np.arange(1), [])
        res = train_optimizer(tc, [scenes[i] for i in tr], [scenes[i] for i in va], kws_params)
        self.phi_ = phi_from_checkpoint(res.best)
        self.checkpoint_ = res.best
        self.history_ = res.history
        self.n_features_in_ = X.shape[-1]
        return self

    def transform(self, X):
        check_is_fitted(self, "phi_")
        X = check_signal_pairs(X)
        batch = SceneBatch.from_arrays(X[:, 0], X[:, 1], np.zeros(len(X), int), self.K, self.B)
        return meta_residual(self.phi_, batch, self.K, self.group_hop)


class KalmanAEC(TransformerMixin, BaseEstimator):
    """Diagonalised frequency-domain Kalman echo canceller."""

    def __init__(self, K=1024, B=4, A=0.999, q=1e-3, smoothing=0.99):
        self.K = K
        self.B = B
        self.A = A
        self.q = q
        self.smoothing = smoothing

    def fit(self, X, y=None):
        X = check_signal_pairs(X)
        self.params_ = kalman.KalmanParams(self.A, self.q, self.smoothing)
        self.n_features_in_ = X.shape[-1]
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = check_signal_pairs(X)
        return kalman.run_kalman(X[:, 0], X[:, 1], self.K, self.B, self.params_)
