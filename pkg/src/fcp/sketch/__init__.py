"""Mergeable quantile summaries used to aggregate client scores."""

from __future__ import annotations

from functools import reduce

import numpy as np

from ..errors import InvalidInputError
from .base import (
    ExactSketch,
    MeanOfClientQuantiles,
    QuantileSketch,
    SketchKind,
    SketchName,
    target_rank,
)
from .ddsketch import DDSketch
from .tdigest import TDigest
from .wire import SketchEnvelope, deserialize, serialize

__all__ = [
    "DDSketch",
    "ExactSketch",
    "MeanOfClientQuantiles",
    "QuantileSketch",
    "SketchEnvelope",
    "SketchKind",
    "SketchName",
    "TDigest",
    "achieved_epsilon",
    "deserialize",
    "make_sketch",
    "merge",
    "merge_all",
    "rank_error",
    "serialize",
    "target_rank",
]


def make_sketch(kind: SketchKind, values=()) -> QuantileSketch:
    if kind.name is SketchName.EXACT:
        sketch = ExactSketch()
    elif kind.name is SketchName.TDIGEST:
        sketch = TDigest(kind.parameter)
    elif kind.name is SketchName.DDSKETCH:
        sketch = DDSketch(kind.parameter)
    else:
        sketch = MeanOfClientQuantiles()
    return sketch.extend(values)


def merge(a: QuantileSketch, b: QuantileSketch) -> QuantileSketch:
    return a.merge(b)


def merge_all(sketches) -> QuantileSketch:
    sketches = list(sketches)
    if not sketches:
        raise InvalidInputError("nothing to merge")
    return reduce(merge, sketches[1:], sketches[0].copy())


def rank_error(value, sorted_reference, q) -> float:
    """Distance of ``value``'s rank from ``q * N``, as a fraction of N.

    A value holding ties covers the rank interval ``[#(< v) + 1, #(<= v)]``;
    a value absent from the data sits at rank ``#(<= v)``.
    """
    n = sorted_reference.size
    below = int(np.searchsorted(sorted_reference, value, side="left"))
    upto = int(np.searchsorted(sorted_reference, value, side="right"))
    lo = below + 1 if upto > below else upto
    target = q * n
    return max(0.0, lo - target, target - upto) / n


def achieved_epsilon(sketch: QuantileSketch, reference_values, q_grid) -> float:
    """Worst rank error of ``sketch`` over ``q_grid`` against the exact data."""
    ref = np.sort(np.asarray(reference_values, dtype=float).ravel())
    if ref.size != sketch.count:
        raise InvalidInputError(
            f"reference holds {ref.size} values but the sketch saw {sketch.count}"
        )
    return max(rank_error(sketch.query(q), ref, q) for q in q_grid)
