"""Thresholded decisions, micro/macro F1 and evaluation reports."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from .corpus import Sample
from .errors import IncompatibleCheckpoint, ShapeMismatch
from .taxonomy import LabelHierarchy


def _check(pred: np.ndarray, gold: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred, gold = np.asarray(pred).astype(bool), np.asarray(gold).astype(bool)
    if pred.shape != gold.shape or pred.ndim != 2:
        raise ShapeMismatch(f"pred {pred.shape} vs gold {gold.shape}")
    return pred, gold


def _f1(tp, fp, fn):
    tp, fp, fn = (np.asarray(x, dtype=np.float64) for x in (tp, fp, fn))
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    return precision, recall, f1


def micro_f1(pred, gold) -> float:
    pred, gold = _check(pred, gold)
    tp = np.sum(pred & gold)
    fp = np.sum(pred & ~gold)
    fn = np.sum(~pred & gold)
    return float(_f1(tp, fp, fn)[2])


def per_label_counts(pred, gold):
    pred, gold = _check(pred, gold)
    return (pred & gold).sum(0), (pred & ~gold).sum(0), (~pred & gold).sum(0)


def macro_f1(pred, gold) -> float:
    tp, fp, fn = per_label_counts(pred, gold)
    f1 = _f1(tp, fp, fn)[2]
    return float(f1.mean()) if f1.size else 0.0


def decide(probs, threshold: float) -> np.ndarray:
    return np.asarray(probs) > threshold


@dataclass
class MetricsReport:
    micro_f1: float
    macro_f1: float
    labels: list[str]
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]
    level_macro_f1: list[float]
    threshold: float
    n_samples: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_text(self) -> str:
        lines = [
            f"samples      {self.n_samples}",
            f"threshold    {self.threshold:g}",
            f"micro_f1     {self.micro_f1:.4f}",
            f"macro_f1     {self.macro_f1:.4f}",
            "",
            f"{'level':<8}{'macro_f1':>10}",
        ]
        lines += [f"{h + 1:<8}{v:>10.4f}" for h, v in enumerate(self.level_macro_f1)]
        width = max([5, *map(len, self.labels)]) + 2
        lines += ["", f"{'label':<{width}}{'prec':>8}{'rec':>8}{'f1':>8}{'support':>9}"]
        for row in zip(self.labels, self.precision, self.recall, self.f1, self.support):
            name, p, r, f, s = row
            lines.append(f"{name:<{width}}{p:>8.4f}{r:>8.4f}{f:>8.4f}{s:>9d}")
        return "\n".join(lines) + "\n"


def metrics_report(h: LabelHierarchy, pred, gold, threshold: float, extra: dict | None = None) -> MetricsReport:
    pred, gold = _check(pred, gold)
    if pred.shape[1] != h.size:
        raise ShapeMismatch(f"{pred.shape[1]} label columns for a {h.size}-label hierarchy")
    tp, fp, fn = per_label_counts(pred, gold)
    precision, recall, f1 = _f1(tp, fp, fn)
    levels = [float(f1[list(block)].mean()) for block in h.levels]
    return MetricsReport(
        micro_f1=micro_f1(pred, gold),
        macro_f1=float(f1.mean()),
        labels=list(h.labels),
        precision=[float(x) for x in precision],
        recall=[float(x) for x in recall],
        f1=[float(x) for x in f1],
        support=[int(x) for x in gold.sum(0)],
        level_macro_f1=levels,
        threshold=threshold,
        n_samples=int(pred.shape[0]),
        extra=dict(extra or {}),
    )


def predict_proba(model, samples: Sequence[Sample], mode: str | None = None, batch_size: int = 256) -> np.ndarray:
    """Final per-label probabilities for each sample, shape (N, |C|)."""
    if not samples:
        return np.zeros((0, model.hierarchy.size))
    out = []
    for start in range(0, len(samples), batch_size):
        ids = torch.as_tensor(np.stack([s.token_ids for s in samples[start:start + batch_size]]))
        out.append(model.predict_proba(ids, mode).to(torch.float64).numpy())
    return np.concatenate(out)


def evaluate(model, samples: Sequence[Sample], threshold: float = 0.5, mode: str | None = None) -> MetricsReport:
    """Score ``samples`` with the model's pooled prediction (or a single head via ``mode``)."""
    h = model.hierarchy
    if samples and samples[0].target.shape[0] != h.size:
        raise IncompatibleCheckpoint(f"dataset has {samples[0].target.shape[0]} labels, model has {h.size}")
    if samples and max(int(s.token_ids.max()) for s in samples) >= model.cfg.encoder.vocab_size:
        raise IncompatibleCheckpoint("dataset token ids exceed the model vocabulary")
    probs = predict_proba(model, samples, mode)
    gold = np.stack([s.target for s in samples]) if samples else np.zeros((0, h.size))
    return metrics_report(h, decide(probs, threshold), gold, threshold, {"mode": mode or "default"})
