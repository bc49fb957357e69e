"""Balanced accuracy, group breakdowns, difficulty strata, and delta tables.

Balanced accuracy is the unweighted mean of per-class recall@k over the
classes present in the evaluated set, which is robust to class imbalance but
NOT decomposable over groups: a group table's cells each average over the
classes present in that group only.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from typing import Any, Mapping, Sequence

from .errors import (
    EmptyEvalSetError,
    StructureMismatchError,
    UnknownGroupKeyError,
)

GROUP_KEYS = ("continent", "country", "income_bucket")
SPLITS = ("source-train", "source-val", "source-test", "target")
INCOME_BUCKETS = ("low", "medium", "high")


@dataclass(frozen=True)
class SampleMeta:
    """One dataset record: identity, label, geography, income, split."""

    id: str
    label: str
    country: str
    continent: str
    income_bucket: str
    split: str


def load_manifest(path) -> list[SampleMeta]:
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            raw = raw.strip()
            if not raw:
                continue
            rec = json.loads(raw)
            samples.append(SampleMeta(
                id=rec["id"], label=rec["class"], country=rec["country"],
                continent=rec["continent"], income_bucket=rec["income_bucket"],
                split=rec["split"],
            ))
    return samples


def save_manifest(samples: Sequence[SampleMeta], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps({
                "id": s.id, "class": s.label, "country": s.country,
                "continent": s.continent, "income_bucket": s.income_bucket,
                "split": s.split,
            }) + "\n")


def per_class_recall(ranked: Sequence[Sequence[str]], labels: Sequence[str],
                     k: int) -> dict[str, float]:
    """recall@k per class: fraction of the class's samples with the true
    label in the top k of the ranking."""
    if len(ranked) != len(labels):
        raise ValueError("ranked predictions and labels must align")
    if not labels:
        raise EmptyEvalSetError("no samples to evaluate")
    if k < 1:
        raise ValueError("k must be >= 1")
    hits: dict[str, int] = {}
    totals: dict[str, int] = {}
    for ranking, label in zip(ranked, labels):
        totals[label] = totals.get(label, 0) + 1
        if label in ranking[:k]:
            hits[label] = hits.get(label, 0) + 1
    return {c: hits.get(c, 0) / n for c, n in totals.items()}


def balanced_accuracy(ranked: Sequence[Sequence[str]], labels: Sequence[str],
                      k: int = 1) -> float:
    """Unweighted mean of per-class recall@k over classes present."""
    recalls = per_class_recall(ranked, labels, k)
    return sum(recalls.values()) / len(recalls)


@dataclass
class EvalReport:
    """Recall and balanced accuracy at each requested k, with class counts."""

    ks: tuple[int, ...]
    per_class_recall: dict[int, dict[str, float]]
    balanced_acc: dict[int, float]
    class_counts: dict[str, int]
    n_samples: int

    def to_json_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "class_counts": dict(sorted(self.class_counts.items())),
            "per_class_recall": {
                str(k): dict(sorted(self.per_class_recall[k].items())) for k in self.ks
            },
            "balanced_acc": {str(k): self.balanced_acc[k] for k in self.ks},
        }


def build_report(ranked: Sequence[Sequence[str]], labels: Sequence[str],
                 ks: Sequence[int] = (1, 3)) -> EvalReport:
    counts: dict[str, int] = {}
    for label in labels:
        counts[label] = counts.get(label, 0) + 1
    pcr = {k: per_class_recall(ranked, labels, k) for k in ks}
    return EvalReport(
        ks=tuple(ks),
        per_class_recall=pcr,
        balanced_acc={k: sum(pcr[k].values()) / len(pcr[k]) for k in ks},
        class_counts=counts,
        n_samples=len(labels),
    )


def group_report(ranked: Sequence[Sequence[str]], metas: Sequence[SampleMeta],
                 group_key: str, ks: Sequence[int] = (1, 3)) -> dict[str, EvalReport]:
    """Per-group reports over classes present in each group.

    Groups with zero samples are simply absent from the result.
    """
    if group_key not in GROUP_KEYS:
        raise UnknownGroupKeyError(
            f"group key must be one of {GROUP_KEYS}, got {group_key!r}"
        )
    if len(ranked) != len(metas):
        raise ValueError("ranked predictions and metas must align")
    buckets: dict[str, list[int]] = {}
    for i, meta in enumerate(metas):
        buckets.setdefault(getattr(meta, group_key), []).append(i)
    return {
        group: build_report([ranked[i] for i in idx],
                            [metas[i].label for i in idx], ks)
        for group, idx in sorted(buckets.items())
    }


@dataclass
class StratumRow:
    """One difficulty stratum: classes below a baseline-recall threshold."""

    threshold: float
    classes: list[str]
    n_classes: int
    method_mean: float | None
    baseline_mean: float | None

    @property
    def delta(self) -> float | None:
        if self.method_mean is None or self.baseline_mean is None:
            return None
        return self.method_mean - self.baseline_mean


DEFAULT_THRESHOLDS = (40.0, 60.0, 80.0, 100.0)


def difficulty_strata(baseline_recalls: Mapping[str, float],
                      method_recalls: Mapping[str, float],
                      thresholds: Sequence[float] = DEFAULT_THRESHOLDS
                      ) -> list[StratumRow]:
    """Mean method recall over classes with baseline recall below each threshold.

    Thresholds are percents; recalls are fractions in [0, 1]. Selection is
    strict (< t%) except at t=100, which is inclusive and therefore covers
    the full class set. An empty stratum yields a null cell, not an error.
    """
    missing = set(method_recalls) - set(baseline_recalls)
    if missing:
        raise ValueError(f"baseline recalls missing classes: {sorted(missing)}")
    rows = []
    for t in thresholds:
        if t >= 100.0:
            selected = sorted(method_recalls)
        else:
            selected = sorted(c for c in method_recalls
                              if baseline_recalls[c] * 100.0 < t)
        if selected:
            method_mean = sum(method_recalls[c] for c in selected) / len(selected)
            baseline_mean = sum(baseline_recalls[c] for c in selected) / len(selected)
        else:
            method_mean = baseline_mean = None
        rows.append(StratumRow(threshold=float(t), classes=selected,
                               n_classes=len(selected), method_mean=method_mean,
                               baseline_mean=baseline_mean))
    return rows


def delta_table(report_a: Any, report_b: Any) -> Any:
    """Signed differences b - a over two structurally aligned reports.

    Works over nested dicts of numbers (the serialized report form). A key
    missing from one side yields a null cell; a scalar-vs-mapping conflict is
    a structure mismatch.
    """
    if isinstance(report_a, Mapping) and isinstance(report_b, Mapping):
        keys = sorted(set(report_a) | set(report_b))
        out = {}
        for key in keys:
            if key not in report_a or key not in report_b:
                out[key] = None
            else:
                out[key] = delta_table(report_a[key], report_b[key])
        return out
    if isinstance(report_a, (int, float)) and isinstance(report_b, (int, float)):
        return report_b - report_a
    if report_a is None or report_b is None:
        return None
    raise StructureMismatchError(
        f"cannot diff {type(report_a).__name__} against {type(report_b).__name__}"
    )


def format_percent(x: float | None) -> str:
    """Serialized tables report percentages to one decimal place."""
    return "" if x is None else f"{x * 100.0:.1f}"


def write_group_csv(path, groups: Mapping[str, EvalReport], k: int = 1,
                    deltas: Mapping[str, float] | None = None) -> None:
    """CSV mirroring the paper-style (group, acc, delta) column layout."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "acc", "delta"])
        for group in sorted(groups):
            acc = groups[group].balanced_acc.get(k)
            delta = deltas.get(group) if deltas else None
            writer.writerow([group, format_percent(acc),
                             "" if delta is None else f"{delta * 100.0:+.1f}"])


def write_strata_csv(path, rows: Sequence[StratumRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold_pct", "n_classes", "method_acc",
                         "baseline_acc", "delta"])
        for row in rows:
            writer.writerow([
                f"{row.threshold:g}", row.n_classes,
                format_percent(row.method_mean), format_percent(row.baseline_mean),
                "" if row.delta is None else f"{row.delta * 100.0:+.1f}",
            ])


def strata_rows_to_json(rows: Sequence[StratumRow]) -> list[dict]:
    return [asdict(row) | {"delta": row.delta} for row in rows]
