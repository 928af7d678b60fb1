"""Classification and echo-reduction metrics, plus the paired permutation test."""
from __future__ import annotations

import itertools
import logging
from typing import Optional

import numpy as np

from .errors import UsageError

log = logging.getLogger(__name__)


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Rows are reference classes, columns predictions."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, int), np.asarray(y_pred, int)), 1)
    return cm


def per_class_f1(cm) -> np.ndarray:
    cm = np.asarray(cm)
    tp = np.diag(cm).astype(float)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    den = 2 * tp + fp + fn
    return np.divide(2 * tp, den, out=np.zeros_like(tp), where=den > 0)


def f1_scores(cm) -> tuple:
    """(macro, micro) F1.  Macro averages over classes present in the reference."""
    cm = np.asarray(cm)
    if cm.sum() == 0:
        raise UsageError("confusion matrix is empty")
    present = cm.sum(axis=1) > 0
    macro = float(np.mean(per_class_f1(cm)[present]))
    tp = np.trace(cm)
    fp = fn = cm.sum() - tp
    micro = float(2 * tp / (2 * tp + fp + fn))
    return macro, micro


def erle(d, e, mask=None, warmup: int = 0, threshold: float = 1e-12) -> Optional[float]:
    """Echo return loss enhancement in dB over ``mask`` after ``warmup`` samples.

    Returns ``None`` (and logs a warning) when nothing is left to measure.
    """
    d = np.asarray(d, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)[:len(d)]
    keep = np.ones(len(d), bool) if mask is None else np.asarray(mask, bool).copy()
    keep[:warmup] = False
    num = float(np.sum(d[keep] ** 2))
    if not keep.any() or num <= threshold:
        log.warning("ERLE undefined: no echo-bearing samples left after masking")
        return None
    return 10.0 * np.log10(num / max(float(np.sum(e[keep] ** 2)), 1e-300))


def scene_erle(scene, residual, warmup: int = 0) -> Optional[float]:
    """ERLE over the keyword-free part of a scene."""
    return erle(scene.d, residual, ~scene.keyword_mask, warmup)


def paired_significance(correct_a, correct_b, trials: int = 10000, seed: int = 0) -> float:
    """Two-sided paired permutation (sign-flip) test on per-scene correctness.

    Enumerates all sign patterns exactly when ``2**n <= trials``; otherwise
    draws ``trials`` seeded random patterns.  p = fraction of patterns whose
    absolute summed difference reaches the observed one.
    """
    a = np.asarray(correct_a).astype(np.int64)
    b = np.asarray(correct_b).astype(np.int64)
    if a.shape != b.shape or a.ndim != 1:
        raise UsageError("paired test needs two equally sized 1-d scene sets")
    diff = a - b
    observed = abs(int(diff.sum()))
    n = len(diff)
    if n <= 20 and 2 ** n <= trials:
        signs = np.array(list(itertools.product((1, -1), repeat=n)), dtype=np.int64)
    else:
        rng = np.random.default_rng(seed)
        signs = rng.choice(np.array([1, -1]), size=(trials, n))
    stats = np.abs(signs @ diff)
    return float(np.mean(stats >= observed))
