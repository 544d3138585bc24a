"""Evaluation reports, comparison tables, and the cluster-count sweep.

Conventions: confusion rows are true labels, columns predictions.
Per-class accuracy for a class with no true samples is undefined (None /
JSON null).  Macro-F1 averages F1 over every class that appears in the
rows *or* columns; classes absent from both are excluded rather than
counted as zeros, and 0/0 inside precision/recall/F1 collapses to 0.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import EMOTIONS, batch_digest
from .models import Model, forward_logits

# fixed presentation order for comparison tables
DISPLAY_ORDER = ("Angry", "Happy", "Sad", "Neutral", "Surprise", "Disgust", "Fear")


class MetricsError(Exception):
    pass


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    macro_f1: float
    per_class_accuracy: tuple
    confusion: tuple
    n_samples: int


def confusion_matrix(labels: np.ndarray, preds: np.ndarray, k: int = len(EMOTIONS)) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    p = np.asarray(preds, dtype=np.int64)
    if y.shape != p.shape:
        raise MetricsError(f"labels and predictions differ in shape: {y.shape} vs {p.shape}")
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (y, p), 1)
    return conf


def report_from_confusion(conf: np.ndarray) -> MetricsReport:
    conf = np.asarray(conf, dtype=np.int64)
    total = int(conf.sum())
    if total == 0:
        raise MetricsError("cannot build a report from an empty confusion matrix")
    k = conf.shape[0]
    row = conf.sum(axis=1)
    col = conf.sum(axis=0)
    diag = np.diag(conf)
    per_class = tuple(float(diag[c]) / row[c] if row[c] else None for c in range(k))
    f1s = []
    for c in range(k):
        if row[c] == 0 and col[c] == 0:
            continue  # class absent from truth and predictions alike
        precision = diag[c] / col[c] if col[c] else 0.0
        recall = diag[c] / row[c] if row[c] else 0.0
        f1s.append(2 * precision * recall / (precision + recall) if precision + recall else 0.0)
    return MetricsReport(
        accuracy=float(diag.sum()) / total,
        macro_f1=float(np.mean(f1s)) if f1s else 0.0,
        per_class_accuracy=per_class,
        confusion=tuple(tuple(int(v) for v in r) for r in conf),
        n_samples=total,
    )


def eval_batches(
    model: Model, images: np.ndarray, labels: np.ndarray, batch_size: int = 256, workers: int = 1
) -> tuple[np.ndarray, list[str]]:
    """Score eval batches; returns (confusion, sha256 digest per batch).

    Digests are taken over the raw input bytes of each batch, so callers
    can audit that evaluation saw the data unmodified.  With workers > 1
    batches are scored concurrently and merged in batch order.
    """
    if len(images) == 0:
        raise MetricsError("evaluation needs a non-empty split")
    starts = list(range(0, len(images), batch_size))

    def score(start):
        batch = images[start : start + batch_size]
        digest = batch_digest(batch)
        preds = forward_logits(model, batch, batch_size).argmax(axis=1)
        return digest, confusion_matrix(labels[start : start + batch_size], preds)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(score, starts))
    else:
        results = [score(s) for s in starts]
    conf = np.zeros((len(EMOTIONS), len(EMOTIONS)), dtype=np.int64)
    digests = []
    for digest, part in results:
        conf += part
        digests.append(digest)
    return conf, digests


def evaluate(
    model: Model, images: np.ndarray, labels: np.ndarray, batch_size: int = 256, workers: int = 1
) -> MetricsReport:
    conf, _ = eval_batches(model, images, labels, batch_size, workers)
    return report_from_confusion(conf)


def report_to_json(report: MetricsReport) -> str:
    payload = {
        "schema_version": 1,
        "n_samples": report.n_samples,
        "accuracy": report.accuracy,
        "macro_f1": report.macro_f1,
        "per_class_accuracy": {
            EMOTIONS[c]: report.per_class_accuracy[c] for c in range(len(EMOTIONS))
        },
        "confusion": [list(r) for r in report.confusion],
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def report_from_json(text: str) -> MetricsReport:
    payload = json.loads(text)
    if payload.get("schema_version") != 1:
        raise MetricsError(f"unsupported report schema {payload.get('schema_version')!r}")
    return MetricsReport(
        accuracy=payload["accuracy"],
        macro_f1=payload["macro_f1"],
        per_class_accuracy=tuple(payload["per_class_accuracy"][e] for e in EMOTIONS),
        confusion=tuple(tuple(r) for r in payload["confusion"]),
        n_samples=payload["n_samples"],
    )


def render_report(report: MetricsReport) -> str:
    width = max(len(e) for e in EMOTIONS)
    lines = [
        f"samples        {report.n_samples}",
        f"accuracy       {report.accuracy:.4f}",
        f"macro F1       {report.macro_f1:.4f}",
        "per-class accuracy:",
    ]
    for c, name in enumerate(EMOTIONS):
        v = report.per_class_accuracy[c]
        lines.append(f"  {name:<{width}}  {'n/a' if v is None else f'{v:.4f}'}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# comparisons
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChangeTable:
    """Relative change (percent) of a comparison run against a baseline."""

    per_class: tuple  # ((emotion, pct-or-None), ...) in DISPLAY_ORDER
    accuracy: float | None
    macro_f1: float | None


def _pct(base, comp):
    if base is None or comp is None or base == 0:
        return None  # undefined, rendered as n/a
    return (comp - base) / base * 100.0


def percent_change(base: MetricsReport, comp: MetricsReport) -> ChangeTable:
    per_class = tuple(
        (name, _pct(base.per_class_accuracy[EMOTIONS.index(name)], comp.per_class_accuracy[EMOTIONS.index(name)]))
        for name in DISPLAY_ORDER
    )
    return ChangeTable(
        per_class=per_class,
        accuracy=_pct(base.accuracy, comp.accuracy),
        macro_f1=_pct(base.macro_f1, comp.macro_f1),
    )


def render_change_table(table: ChangeTable) -> str:
    width = max(len(e) for e in EMOTIONS)

    def fmt(v):
        return "n/a" if v is None else f"{v:+.1f}%"

    lines = [f"  {name:<{width}}  {fmt(v)}" for name, v in table.per_class]
    lines.append(f"  {'accuracy':<{width}}  {fmt(table.accuracy)}")
    lines.append(f"  {'macro F1':<{width}}  {fmt(table.macro_f1)}")
    return "\n".join(lines) + "\n"


def change_table_to_json(table: ChangeTable) -> str:
    payload = {
        "schema_version": 1,
        "per_class": [[name, v] for name, v in table.per_class],
        "accuracy": table.accuracy,
        "macro_f1": table.macro_f1,
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# cluster-count sweep
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepResult:
    rows: tuple  # ((k, accuracy, macro_f1), ...)

    def best_k(self) -> int:
        """Highest eval accuracy; ties go to the smaller k."""
        best = max(self.rows, key=lambda r: (r[1], -r[0]))
        return int(best[0])

    def to_csv(self) -> str:
        lines = ["k,accuracy,macro_f1"]
        lines += [f"{k},{acc!r},{f1!r}" for k, acc, f1 in self.rows]
        return "\n".join(lines) + "\n"


def sweep_clusters(
    dataset,
    attention_model: Model,
    predictor_spec,
    config,
    k_values,
    eval_images: np.ndarray,
    eval_labels: np.ndarray,
) -> SweepResult:
    """Train one masked predictor per cluster count and score each.

    The attention model is trained once by the caller and shared across
    every k (its maps do not depend on k), so the sweep only re-runs
    clustering and phase-3 training.
    """
    from . import training  # local import; training depends on this module

    rows = []
    for k in k_values:
        if k < 1:
            raise MetricsError(f"cluster counts must be >= 1, got {k}")
        cfg = training.with_cluster_k(config, int(k))
        model, _, _ = training.train_masked_predictor(dataset, attention_model, predictor_spec, cfg)
        report = evaluate(model, eval_images, eval_labels, cfg.eval_batch_size, cfg.workers)
        rows.append((int(k), report.accuracy, report.macro_f1))
    return SweepResult(rows=tuple(rows))
