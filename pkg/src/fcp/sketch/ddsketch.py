"""DDSketch: logarithmic buckets with a bounded relative value error.

Bucket ``i`` covers ``(gamma**(i-1), gamma**i]`` with
``gamma = (1 + a) / (1 - a)``; answering with ``2 gamma**i / (gamma + 1)`` is
within relative error ``a`` of any value in the bucket. Only non-negative values
are supported, which covers every conformal score. Values at or below
``MIN_INDEXABLE`` go to a zero bucket (key ``ZERO_KEY``) answered by ``0.0``. Once more than ``bin_limit`` buckets
exist, the lowest ones are collapsed together.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import InvalidInputError
from .base import QuantileSketch, SketchKind, check_value, check_values, target_rank

MIN_INDEXABLE = 1e-9
DEFAULT_BIN_LIMIT = 2048
ZERO_KEY = -(2**31)  # below every real key; fits the i32 wire field


class DDSketch(QuantileSketch):
    def __init__(self, relative_accuracy: float = 0.01, bin_limit: int = DEFAULT_BIN_LIMIT):
        super().__init__()
        self.kind = SketchKind.ddsketch(relative_accuracy)
        self.relative_accuracy = self.kind.parameter
        self.gamma = (1 + self.relative_accuracy) / (1 - self.relative_accuracy)
        self._log_gamma = math.log(self.gamma)
        self.bin_limit = bin_limit
        self.bins = {}
        self.min = math.inf
        self.max = -math.inf

    def key(self, value: float) -> int:
        return int(self._keys(np.array([value], dtype=float))[0])

    def _keys(self, values):
        v = np.maximum(values, MIN_INDEXABLE)
        keys = np.ceil(np.log(v) / self._log_gamma).astype(np.int64)
        keys[values <= MIN_INDEXABLE] = ZERO_KEY
        return keys

    def representative(self, key: int) -> float:
        if key == ZERO_KEY:
            return 0.0
        return 2.0 * self.gamma ** key / (self.gamma + 1.0)

    def _check_sign(self, lo):
        if lo < 0:
            raise InvalidInputError("DDSketch only accepts non-negative values")

    def add(self, value):
        v = check_value(value)
        self._check_sign(v)
        k = self.key(v)
        self.bins[k] = self.bins.get(k, 0) + 1
        self._after_insert(1, v, v)
        return self

    def extend(self, values):
        v = check_values(values)
        if v.size == 0:
            return self
        self._check_sign(v.min())
        keys, counts = np.unique(self._keys(v), return_counts=True)
        for k, c in zip(keys.tolist(), counts.tolist()):
            self.bins[k] = self.bins.get(k, 0) + c
        self._after_insert(v.size, float(v.min()), float(v.max()))
        return self

    def _after_insert(self, n, lo, hi):
        self.count += n
        self.min = min(self.min, lo)
        self.max = max(self.max, hi)
        self._collapse()

    def _collapse(self):
        if len(self.bins) <= self.bin_limit:
            return
        keys = sorted(self.bins)
        excess = keys[: len(keys) - self.bin_limit + 1]
        target = excess[-1]
        self.bins[target] = sum(self.bins.pop(k) for k in excess[:-1]) + self.bins[target]

    def merge(self, other):
        self._check_mergeable(other)
        out = DDSketch(self.relative_accuracy, max(self.bin_limit, other.bin_limit))
        for src in (self, other):
            for k, c in src.bins.items():
                out.bins[k] = out.bins.get(k, 0) + c
            out.min = min(out.min, src.min)
            out.max = max(out.max, src.max)
        out.count = self.count + other.count
        out._collapse()
        return out

    def copy(self):
        out = DDSketch(self.relative_accuracy, self.bin_limit)
        out.bins = dict(self.bins)
        out.min, out.max, out.count = self.min, self.max, self.count
        return out

    def _query(self, q):
        rank = target_rank(q, self.count)
        keys = sorted(self.bins)
        cumulative = np.cumsum([self.bins[k] for k in keys])
        k = keys[int(np.searchsorted(cumulative, rank, side="left"))]
        return min(max(self.representative(k), self.min), self.max)
