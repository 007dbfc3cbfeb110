"""Evaluation of conformal predictors on labelled test draws."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

RECORD_HEADER = ("example_id", "client_id", "true_label", "set_size", "covered", "top1_correct")


@dataclass(frozen=True)
class EvalRecord:
    example_id: str
    true_label: int
    set_size: int
    covered: bool
    top1_correct: bool
    client_of_origin: str = ""


class EvalRecords:
    """Column-oriented collection of :class:`EvalRecord` rows."""

    def __init__(self, example_id, true_label, set_size, covered, top1_correct, client_of_origin=None):
        self.example_id = np.asarray(example_id).astype(str)
        self.true_label = np.asarray(true_label, dtype=int)
        self.set_size = np.asarray(set_size, dtype=int)
        self.covered = np.asarray(covered, dtype=bool)
        self.top1_correct = np.asarray(top1_correct, dtype=bool)
        if client_of_origin is None:
            client_of_origin = np.full(self.true_label.size, "")
        self.client_of_origin = np.asarray(client_of_origin).astype(str)
        n = self.true_label.size
        columns = (self.example_id, self.set_size, self.covered, self.top1_correct, self.client_of_origin)
        if any(c.size != n for c in columns):
            raise InvalidInputError("record columns differ in length")
        if n and self.set_size.min() < 1:
            raise InvalidInputError("prediction sets must be non-empty")

    @classmethod
    def from_records(cls, records):
        records = list(records)
        return cls(
            [r.example_id for r in records],
            [r.true_label for r in records],
            [r.set_size for r in records],
            [r.covered for r in records],
            [r.top1_correct for r in records],
            [r.client_of_origin for r in records],
        )

    def __len__(self):
        return self.true_label.size

    def __iter__(self):
        for i in range(len(self)):
            yield EvalRecord(
                str(self.example_id[i]),
                int(self.true_label[i]),
                int(self.set_size[i]),
                bool(self.covered[i]),
                bool(self.top1_correct[i]),
                str(self.client_of_origin[i]),
            )

    def take(self, idx) -> "EvalRecords":
        return EvalRecords(
            self.example_id[idx],
            self.true_label[idx],
            self.set_size[idx],
            self.covered[idx],
            self.top1_correct[idx],
            self.client_of_origin[idx],
        )


def _as_records(records) -> EvalRecords:
    if isinstance(records, EvalRecords):
        return records
    return EvalRecords.from_records(records)


def _nonempty(records):
    r = _as_records(records)
    if len(r) == 0:
        raise InvalidInputError("no records to evaluate")
    return r


def evaluate(predictor, model, sample, client_ids=None) -> EvalRecords:
    """Score every draw of ``sample`` (a :class:`~fcp.federation.MixtureSample`)."""
    mask, _ = predictor.prediction_masks(model, sample.features)
    probs = predictor.probabilities(model, sample.features)
    rows = np.arange(len(sample))
    origin = sample.client_index
    if client_ids is not None:
        origin = np.asarray(client_ids)[origin]
    return EvalRecords(
        sample.ids,
        sample.labels,
        mask.sum(axis=1),
        mask[rows, sample.labels],
        np.argmax(probs, axis=1) == sample.labels,
        origin,
    )


def coverage(records) -> float:
    return float(np.mean(_nonempty(records).covered))


def mean_size(records) -> float:
    return float(np.mean(_nonempty(records).set_size))


def top1_accuracy(records) -> float:
    return float(np.mean(_nonempty(records).top1_correct))


def size_stratified_coverage(records):
    """Coverage and mean size within quartiles of the set-size distribution.

    Boundaries are the 25/50/75th percentiles of observed sizes (lower
    interpolation, so they are actual sizes). A record belongs to the first
    stratum whose upper boundary it does not exceed, so ties go to the lower
    stratum. Empty strata report ``count == 0`` and ``None`` statistics.
    """
    r = _nonempty(records)
    if len(r) < 4:
        raise InvalidInputError("size-stratified coverage needs at least 4 records")
    cuts = np.quantile(r.set_size, [0.25, 0.5, 0.75], method="lower")
    stratum = np.searchsorted(cuts, r.set_size, side="left")
    out = []
    for i in range(4):
        sel = stratum == i
        n = int(sel.sum())
        out.append({
            "lo_pct": 25 * i,
            "hi_pct": 25 * (i + 1),
            "count": n,
            "coverage": float(r.covered[sel].mean()) if n else None,
            "mean_size": float(r.set_size[sel].mean()) if n else None,
        })
    return out


def recombine_strata(strata) -> float:
    """Count-weighted average of stratum coverages."""
    total = sum(s["count"] for s in strata)
    return sum(s["coverage"] * s["count"] for s in strata if s["count"]) / total


def selective_accuracy_curve(records, exclusion_fractions):
    """Top-1 accuracy after abstaining on the largest prediction sets.

    For each fraction ``f`` the ``floor(f * n)`` records with the largest sets
    are dropped; among equal sizes the larger ``example_id`` goes first.
    """
    r = _nonempty(records)
    n = len(r)
    order = np.lexsort((r.example_id, r.set_size))[::-1]
    out = []
    for f in exclusion_fractions:
        if not (0.0 <= f < 1.0):
            raise InvalidInputError(f"exclusion fraction must lie in [0, 1), got {f}")
        drop = int(math.floor(f * n + 1e-9))
        kept = order[drop:]
        out.append((float(f), float(r.top1_correct[kept].mean())))
    return out


def relative_inefficiency(mean_size_method: float, mean_size_baseline: float) -> float:
    if not (mean_size_baseline > 0):
        raise InvalidInputError("baseline mean size must be positive")
    return float(mean_size_method) / float(mean_size_baseline)


def format_ratio(ratio: float) -> str:
    return f"{ratio:.1f}x"


def summarize(records, n_classes=None, exclusion_fractions=(0.0, 0.25, 0.5, 0.7, 0.8)) -> dict:
    r = _nonempty(records)
    summary = {
        "n_examples": len(r),
        "coverage": coverage(r),
        "mean_size": mean_size(r),
        "top1_accuracy": top1_accuracy(r),
        "ssc": size_stratified_coverage(r) if len(r) >= 4 else [],
        "selective": [{"excluded": f, "accuracy": a} for f, a in selective_accuracy_curve(r, exclusion_fractions)],
    }
    if n_classes is not None:
        summary["n_classes"] = int(n_classes)
    return summary


def per_client_coverage(records) -> dict:
    r = _nonempty(records)
    return {str(c): float(r.covered[r.client_of_origin == c].mean()) for c in sorted(set(r.client_of_origin))}


def write_records_csv(path, records):
    r = _as_records(records)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(RECORD_HEADER)
        for rec in r:
            writer.writerow([
                rec.example_id,
                rec.client_of_origin,
                rec.true_label,
                rec.set_size,
                int(rec.covered),
                int(rec.top1_correct),
            ])
    return path
