"""Experiment drivers: per-canceller evaluation with a keyword classifier,
the model x head swap matrix, and paired significance between reports."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import kalman
from .errors import ConfigurationError, UsageError
from .metrics import confusion_matrix, f1_scores, paired_significance, scene_erle
from .training import SceneBatch, mel_features, meta_residual, predict_classes

CANCELLERS = ("no-echo", "no-aec", "diag-kf", "meta", "ct-meta")
SIGNIFICANCE_LABEL = "paired permutation test (sign flips on per-scene correctness)"


@dataclass
class ExperimentSpec:
    canceller: str
    kws: dict
    scenes: list
    K: int = 1024
    B: int = 4
    phi: Optional[dict] = None
    kf_params: kalman.KalmanParams = kalman.KalmanParams()
    group_hop: int = 2
    constrained_grad: bool = False
    name: Optional[str] = None
    kws_name: str = "kws"


@dataclass
class MetricsReport:
    name: str
    canceller: str
    kws_name: str
    confusion: np.ndarray
    macro_f1: float
    micro_f1: float
    erle_db: Optional[float]
    scene_ids: list
    labels: np.ndarray
    predicted: np.ndarray
    scene_erle: list = field(default_factory=list)

    @property
    def correct(self) -> np.ndarray:
        return (self.labels == self.predicted).astype(np.int64)

    @property
    def class_counts(self) -> list:
        return self.confusion.sum(axis=1).tolist()

    def records(self) -> list:
        head = {"record": "summary", "name": self.name, "canceller": self.canceller, "kws": self.kws_name,
                "macro_f1": self.macro_f1, "micro_f1": self.micro_f1, "erle_db": self.erle_db,
                "class_counts": self.class_counts, "n_scenes": len(self.scene_ids)}
        rows = [head]
        for i, sid in enumerate(self.scene_ids):
            rows.append({"record": "scene", "name": self.name, "id": sid, "label": int(self.labels[i]),
                         "predicted": int(self.predicted[i]), "erle_db": self.scene_erle[i]})
        return rows

    def jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())


def _fmt_erle(x):
    return "-" if x is None else f"{x:.2f}"


def format_table(reports, significance: Optional[dict] = None) -> str:
    """Aligned text table: system, macro (micro) F1, ERLE."""
    rows = [("System", "KWS", "F1 Macro (Micro)", "ERLE dB")]
    for r in reports:
        rows.append((r.name, r.kws_name, f"{r.macro_f1:.3f} ({r.micro_f1:.3f})", _fmt_erle(r.erle_db)))
    widths = [max(len(row[i]) for row in rows) for i in range(4)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    if significance:
        lines.append("")
        lines.append(f"significance: {SIGNIFICANCE_LABEL}")
        for (a, b), p in significance.items():
            lines.append(f"  {a} vs {b}: p = {p:.4f}")
    return "\n".join(lines) + "\n"


def relabel(scenes, vocabulary) -> list:
    """Map global keyword classes onto a task's local label indices."""
    vocab = list(vocabulary)
    out = []
    for s in scenes:
        if s.c not in vocab:
            raise ConfigurationError(f"scene {s.id}: class {s.c} not in task vocabulary {vocab}")
        out.append(replace(s, c=vocab.index(s.c)))
    return out


def check_compatible(spec: ExperimentSpec) -> None:
    """Fail before any evaluation when checkpoints and data disagree."""
    if spec.canceller not in CANCELLERS:
        raise ConfigurationError(f"unknown canceller {spec.canceller!r}; choose from {CANCELLERS}")
    if not spec.scenes:
        raise UsageError("evaluation fold is empty")
    C = spec.kws["out.W"].shape[1]
    labels = [s.c for s in spec.scenes]
    if max(labels) >= C or min(labels) < 0:
        raise ConfigurationError(f"fold has class {max(labels)} but the classifier has {C} classes")
    if spec.canceller in ("meta", "ct-meta"):
        if spec.phi is None:
            raise ConfigurationError(f"canceller {spec.canceller!r} needs optimizer parameters")
        if spec.phi["block_gain"].shape[0] != spec.B:
            raise ConfigurationError(f"optimizer was trained for B={spec.phi['block_gain'].shape[0]}, "
                                     f"evaluation uses B={spec.B}")


def residuals(spec: ExperimentSpec, batch_size: int = 32) -> list:
    scenes = spec.scenes
    if spec.canceller == "no-echo":
        return [s.s + s.n for s in scenes]
    if spec.canceller == "no-aec":
        return [s.d.copy() for s in scenes]
    out = []
    for j in range(0, len(scenes), batch_size):
        chunk = scenes[j:j + batch_size]
        if spec.canceller == "diag-kf":
            n = max(len(s.d) for s in chunk)
            u = np.stack([np.pad(s.u, (0, n - len(s.u))) for s in chunk])
            d = np.stack([np.pad(s.d, (0, n - len(s.d))) for s in chunk])
            e = kalman.run_kalman(u, d, spec.K, spec.B, spec.kf_params)
        else:
            batch = SceneBatch.from_scenes(chunk, spec.K, spec.B)
            e = meta_residual(spec.phi, batch, spec.K, spec.group_hop, spec.constrained_grad)
        out.extend(e[i, :len(s.d)] for i, s in enumerate(chunk))
    return out


def run_experiment(spec: ExperimentSpec) -> MetricsReport:
    check_compatible(spec)
    res = residuals(spec)
    pred = predict_classes(spec.kws, mel_features(res))
    labels = np.array([s.c for s in spec.scenes])
    C = spec.kws["out.W"].shape[1]
    macro, micro = f1_scores(confusion_matrix(labels, pred, C))
    per_scene = []
    if spec.canceller != "no-echo":
        warm = spec.B * (spec.K // 2)
        per_scene = [scene_erle(s, e, warm) for s, e in zip(spec.scenes, res)]
    defined = [x for x in per_scene if x is not None]
    return MetricsReport(
        name=spec.name or spec.canceller, canceller=spec.canceller, kws_name=spec.kws_name,
        confusion=confusion_matrix(labels, pred, C), macro_f1=macro, micro_f1=micro,
        erle_db=float(np.mean(defined)) if defined else None,
        scene_ids=[s.id for s in spec.scenes], labels=labels, predicted=np.asarray(pred),
        scene_erle=per_scene if per_scene else [None] * len(spec.scenes),
    )


def compare(report_a: MetricsReport, report_b: MetricsReport, trials: int = 10000, seed: int = 0) -> float:
    if report_a.scene_ids != report_b.scene_ids:
        raise UsageError("significance needs reports over the same scenes in the same order")
    return paired_significance(report_a.correct, report_b.correct, trials, seed)


@dataclass
class SwapMatrix:
    models: list
    heads: list
    matched: dict          # model name -> head name it was trained with
    reports: dict          # (model, head) -> MetricsReport

    def f1(self, model: str, head: str) -> float:
        return self.reports[(model, head)].macro_f1

    def diagonal_checks(self) -> dict:
        """head -> True when its matched model scores >= every mismatched model."""
        out = {}
        for m, h in self.matched.items():
            others = [self.f1(o, h) for o in self.models if o != m]
            out[h] = all(self.f1(m, h) >= x for x in others)
        return out

    def table(self) -> str:
        cols = ["model \\ head"] + list(self.heads)
        rows = [cols]
        for m in self.models:
            row = [m]
            for h in self.heads:
                flag = "*" if self.matched.get(m) == h else " "
                r = self.reports[(m, h)]
                row.append(f"{r.macro_f1:.3f} ({r.micro_f1:.3f}){flag}")
            rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(cols))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        lines.append("* matched pair (model trained with this head)")
        for h, ok in self.diagonal_checks().items():
            lines.append(f"column {h}: matched >= mismatched: {'yes' if ok else 'NO'}")
        return "\n".join(lines) + "\n"

    def jsonl(self) -> str:
        out = []
        for (m, h), r in self.reports.items():
            out.append(json.dumps({"record": "swap", "model": m, "head": h, "matched": self.matched.get(m) == h,
                                   "macro_f1": r.macro_f1, "micro_f1": r.micro_f1, "erle_db": r.erle_db},
                                  sort_keys=True) + "\n")
        return "".join(out)


def swap_matrix(models: dict, heads: dict, matched: dict, K: int, B: int, group_hop: int = 2,
                canceller: str = "ct-meta") -> SwapMatrix:
    """Evaluate every optimizer in ``models`` with every head.

    ``heads`` maps a head name to ``(kws_params, scenes)``: each head is
    scored on its own task's scenes.  ``matched`` maps model -> head.
    """
    specs = {}
    for m, phi in models.items():
        for h, (kp, scenes) in heads.items():
            specs[(m, h)] = ExperimentSpec(canceller, kp, list(scenes), K, B, phi=phi,
                                           group_hop=group_hop, name=m, kws_name=h)
    for s in specs.values():
        check_compatible(s)
    reports = {key: run_experiment(s) for key, s in specs.items()}
    return SwapMatrix(list(models), list(heads), dict(matched), reports)
