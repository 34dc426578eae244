"""Per-stage Precision / Recall / F1, expert-weighted recall and latency statistics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .engine import PredictionRecord
from .errors import EmptyDataset, EmptySamples, FormatError, IdMismatch, UnknownLabel
from .ontology import UNKNOWN, StageId, Taxonomy


@dataclass(frozen=True)
class AnnotatedImage:
    """Gold labels for one image: per stage, (label, consensus weight) pairs."""

    image_id: str
    labels: dict

    def gold(self, stage: StageId) -> tuple[tuple[str, float], ...]:
        return self.labels.get(StageId.parse(stage), ())


@dataclass(frozen=True)
class StageMetrics:
    precision: float
    recall: float
    f1: float
    ewr: float
    macro_recall: float
    images: int
    predicted: int
    gold: int
    true_positives: int

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "ewr": self.ewr,
            "macro_recall": self.macro_recall,
            "support": {
                "images": self.images,
                "predicted": self.predicted,
                "gold": self.gold,
                "true_positives": self.true_positives,
            },
        }


@dataclass(frozen=True)
class LatencySummary:
    avg: float
    p50: float
    p90: float
    p95: float
    n: int

    def to_dict(self) -> dict:
        return {"avg": self.avg, "p50": self.p50, "p90": self.p90, "p95": self.p95, "n": self.n}


# -- loading -----------------------------------------------------------------


def _lines(source) -> Iterable[tuple[int, str]]:
    data = source.read() if hasattr(source, "read") else source
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    for number, line in enumerate(data.splitlines(), 1):
        if line.strip():
            yield number, line


def load_annotations(source, taxonomy: Taxonomy) -> list[AnnotatedImage]:
    """Read one JSON object per line.

    Each line is ``{"image_id": ..., "category": [{"label": ..., "weight": ...}],
    "subcategory": [...], "cooking_style": [...]}``. Labels must exist at
    their level; weights must be positive. Hierarchy consistency across
    stages is not required.
    """
    out: list[AnnotatedImage] = []
    seen: set[str] = set()
    for number, line in _lines(source):
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"line {number}: not JSON ({exc.msg})") from None
        if not isinstance(doc, dict) or not isinstance(doc.get("image_id"), str):
            raise FormatError(f"line {number}: expected an object with a string image_id")
        image_id = doc["image_id"]
        if image_id in seen:
            raise FormatError(f"line {number}: duplicate image_id {image_id!r}")
        seen.add(image_id)
        labels = {}
        for stage in StageId:
            entries = doc.get(stage.key)
            if entries is None:
                continue
            if not isinstance(entries, list) or not entries:
                raise FormatError(f"line {number}: {stage.key} must be a non-empty list")
            pairs = []
            for entry in entries:
                if not isinstance(entry, dict) or not isinstance(entry.get("label"), str):
                    raise FormatError(f"line {number}: bad {stage.key} entry {entry!r}")
                label = entry["label"]
                weight = entry.get("weight", 1.0)
                if isinstance(weight, bool) or not isinstance(weight, (int, float)) or not weight > 0 or not math.isfinite(weight):
                    raise FormatError(f"line {number}: weight of {label!r} must be a positive number")
                if not taxonomy.has_label(stage, label):
                    raise UnknownLabel(f"line {number}: {label!r} is not a {stage.key} label")
                if label in (p[0] for p in pairs):
                    raise FormatError(f"line {number}: {label!r} repeated under {stage.key}")
                pairs.append((label, float(weight)))
            labels[stage] = tuple(pairs)
        out.append(AnnotatedImage(image_id, labels))
    return out


def load_predictions(source) -> list[PredictionRecord]:
    """Read prediction records, one JSON object per line."""
    out = []
    for number, line in _lines(source):
        try:
            out.append(PredictionRecord.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"line {number}: bad prediction record ({exc})") from None
    return out


# -- alignment -----------------------------------------------------------------


def align(predictions: Sequence[PredictionRecord], gold: Sequence[AnnotatedImage]):
    """Pair records with annotations by image_id, in annotation order."""
    by_id = {}
    for rec in predictions:
        if rec.image_id in by_id:
            raise IdMismatch(f"duplicate prediction for {rec.image_id!r}")
        by_id[rec.image_id] = rec
    gold_ids = {g.image_id for g in gold}
    missing = sorted(gold_ids - by_id.keys())
    extra = sorted(by_id.keys() - gold_ids)
    if missing or extra:
        raise IdMismatch(f"image ids do not align: missing predictions {missing[:5]}, unannotated {extra[:5]}")
    return [(by_id[g.image_id], g) for g in gold]


def predicted(record: PredictionRecord, stage: StageId) -> tuple[set[str], int]:
    """Distinct predicted labels at ``stage`` and the number of unknown items."""
    values = [item.get(stage) for item in record.items]
    return {v for v in values if v != UNKNOWN}, sum(1 for v in values if v == UNKNOWN)


def _stage_pairs(predictions, gold, stage):
    stage = StageId.parse(stage)
    pairs = [(rec, ann) for rec, ann in align(predictions, gold) if ann.gold(stage)]
    if not pairs:
        raise EmptyDataset(f"no annotated images for {stage.key}")
    return stage, pairs


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def _counts(predictions, gold, stage):
    stage, pairs = _stage_pairs(predictions, gold, stage)
    tp = n_pred = n_gold = 0
    for rec, ann in pairs:
        known, n_unknown = predicted(rec, stage)
        gold_set = {label for label, _ in ann.gold(stage)}
        tp += len(known & gold_set)
        n_pred += len(known) + n_unknown
        n_gold += len(gold_set)
    return stage, pairs, tp, n_pred, n_gold


def compute_prf(predictions, gold, stage, average: str = "micro") -> tuple[float, float, float]:
    """Precision, recall and F1 over label sets at one stage.

    Micro: sum of true positives over summed predicted / gold set sizes,
    with unknown predictions counting as wrong guesses. Macro: mean of
    per-label precision (over predicted labels) and recall (over gold labels).
    """
    if average == "micro":
        _, _, tp, n_pred, n_gold = _counts(predictions, gold, stage)
        p = tp / n_pred if n_pred else 0.0
        r = tp / n_gold if n_gold else 0.0
        return p, r, _f1(p, r)
    if average != "macro":
        raise ValueError(f"average must be 'micro' or 'macro', got {average!r}")
    stage, pairs = _stage_pairs(predictions, gold, stage)
    tp: dict[str, int] = {}
    n_pred: dict[str, int] = {}
    n_gold: dict[str, int] = {}
    for rec, ann in pairs:
        known, _ = predicted(rec, stage)
        gold_set = {label for label, _ in ann.gold(stage)}
        for label in known:
            n_pred[label] = n_pred.get(label, 0) + 1
        for label in gold_set:
            n_gold[label] = n_gold.get(label, 0) + 1
        for label in known & gold_set:
            tp[label] = tp.get(label, 0) + 1
    p = sum(tp.get(l, 0) / n for l, n in n_pred.items()) / len(n_pred) if n_pred else 0.0
    r = sum(tp.get(l, 0) / n for l, n in n_gold.items()) / len(n_gold) if n_gold else 0.0
    return p, r, _f1(p, r)


def image_ewr(record: PredictionRecord, annotation: AnnotatedImage, stage: StageId) -> float:
    """Share of the expert weight on this image's gold labels that the prediction hits.

    A predicted label earns its full consensus weight, a missed label earns 0.
    """
    known, _ = predicted(record, stage)
    gold_pairs = annotation.gold(stage)
    total = sum(w for _, w in gold_pairs)
    hit = sum(w for label, w in gold_pairs if label in known)
    return hit / total


def compute_ewr(predictions, gold, stage) -> float:
    """Unweighted mean of per-image expert-weighted recall."""
    stage, pairs = _stage_pairs(predictions, gold, stage)
    return math.fsum(image_ewr(rec, ann, stage) for rec, ann in pairs) / len(pairs)


def per_label_breakdown(predictions, gold, stage) -> dict[str, dict]:
    """Recall and EWR for each gold label, in first-seen order."""
    stage, pairs = _stage_pairs(predictions, gold, stage)
    table: dict[str, dict] = {}
    for rec, ann in pairs:
        known, _ = predicted(rec, stage)
        for label, weight in ann.gold(stage):
            row = table.setdefault(label, {"support": 0, "hits": 0, "weight": 0.0, "weight_hit": 0.0})
            row["support"] += 1
            row["weight"] += weight
            if label in known:
                row["hits"] += 1
                row["weight_hit"] += weight
    return {
        label: {
            "support": row["support"],
            "recall": row["hits"] / row["support"],
            "ewr": row["weight_hit"] / row["weight"],
        }
        for label, row in table.items()
    }


def stage_metrics(predictions, gold, stage) -> StageMetrics:
    stage, pairs, tp, n_pred, n_gold = _counts(predictions, gold, stage)
    p, r, f1 = compute_prf(predictions, gold, stage)
    _, macro_r, _ = compute_prf(predictions, gold, stage, average="macro")
    return StageMetrics(p, r, f1, compute_ewr(predictions, gold, stage), macro_r, len(pairs), n_pred, n_gold, tp)


def _nearest_rank(ordered: Sequence[float], percent: int) -> float:
    rank = max(1, -(-percent * len(ordered) // 100))
    return ordered[rank - 1]


def latency_summary(samples: Sequence[float]) -> LatencySummary:
    """Mean and nearest-rank p50 / p90 / p95 of per-image seconds."""
    if not samples:
        raise EmptySamples("latency_summary needs at least one sample")
    ordered = sorted(float(s) for s in samples)
    return LatencySummary(
        avg=math.fsum(ordered) / len(ordered),
        p50=_nearest_rank(ordered, 50),
        p90=_nearest_rank(ordered, 90),
        p95=_nearest_rank(ordered, 95),
        n=len(ordered),
    )


def evaluate(predictions, gold, latencies: Sequence[float] | None = None) -> dict:
    """Metrics report: per-stage metrics, per-label table, optional latency."""
    align(predictions, gold)
    report: dict = {"images": len(gold), "stages": {}, "per_label": {}}
    for stage in StageId:
        try:
            report["stages"][stage.key] = stage_metrics(predictions, gold, stage).to_dict()
            report["per_label"][stage.key] = per_label_breakdown(predictions, gold, stage)
        except EmptyDataset:
            report["stages"][stage.key] = None
            report["per_label"][stage.key] = {}
    if latencies is not None:
        report["latency"] = latency_summary(latencies).to_dict()
    return report
