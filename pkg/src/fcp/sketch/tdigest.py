"""Merging T-Digest with the arcsine (k1) scale function.

The k1 scale ``k(q) = compression / (2 pi) * asin(2q - 1)`` allows centroids
of roughly constant size in k-space, which makes them tiny near q = 0 and
q = 1. Rank error therefore shrinks in proportion to ``q (1 - q)``.
"""

from __future__ import annotations

import math

import numpy as np

from .base import QuantileSketch, SketchKind, check_value, check_values, target_rank

BUFFER_FACTOR = 10


def _k1(q, compression):
    return compression / (2.0 * math.pi) * math.asin(2.0 * q - 1.0)


def _k1_inverse(k, compression):
    angle = 2.0 * math.pi * k / compression
    if angle >= math.pi / 2:
        return 1.0
    return (math.sin(angle) + 1.0) / 2.0


def _weighted_average(x1, w1, x2, w2):
    # Keep the result inside [x1, x2] despite rounding.
    lo, hi = min(x1, x2), max(x1, x2)
    return min(max((x1 * w1 + x2 * w2) / (w1 + w2), lo), hi)


class TDigest(QuantileSketch):
    def __init__(self, compression: float = 100.0):
        super().__init__()
        self.kind = SketchKind.tdigest(compression)
        self.compression = self.kind.parameter
        self.means = np.empty(0)
        self.weights = np.empty(0)
        self.min = math.inf
        self.max = -math.inf
        self._buffer = []
        self._buffered = 0

    @property
    def buffer_limit(self) -> int:
        return int(BUFFER_FACTOR * self.compression)

    @property
    def max_centroids(self) -> int:
        """Upper bound on centroids retained after compression."""
        return 2 * int(math.ceil(self.compression)) + 2

    def add(self, value):
        v = check_value(value)
        self._buffer.append(np.array([v]))
        self._after_insert(1, v, v)
        return self

    def extend(self, values):
        v = check_values(values)
        if v.size == 0:
            return self
        for start in range(0, v.size, self.buffer_limit):
            chunk = v[start:start + self.buffer_limit]
            self._buffer.append(chunk.copy())
            self._after_insert(chunk.size, float(chunk.min()), float(chunk.max()))
        return self

    def _after_insert(self, n, lo, hi):
        self.count += n
        self._buffered += n
        self.min = min(self.min, lo)
        self.max = max(self.max, hi)
        if self._buffered >= self.buffer_limit:
            self.flush()

    def flush(self):
        """Fold buffered values into the centroid list."""
        if not self._buffered:
            return
        buffered = np.concatenate(self._buffer)
        means = np.concatenate([self.means, buffered])
        weights = np.concatenate([self.weights, np.ones(buffered.size)])
        self._buffer = []
        self._buffered = 0
        self.means, self.weights = self._compress(means, weights)

    def _compress(self, means, weights):
        order = np.argsort(means, kind="stable")
        means = means[order].tolist()
        weights = weights[order].tolist()
        total = float(sum(weights))
        delta = self.compression

        out_m, out_w = [], []
        cur_m, cur_w = means[0], weights[0]
        weight_before = 0.0
        limit = total * _k1_inverse(_k1(0.0, delta) + 1.0, delta)
        for m, w in zip(means[1:], weights[1:]):
            if weight_before + cur_w + w <= limit:
                cur_w += w
                cur_m += (m - cur_m) * w / cur_w
            else:
                out_m.append(cur_m)
                out_w.append(cur_w)
                weight_before += cur_w
                q = min(weight_before / total, 1.0)
                limit = total * _k1_inverse(_k1(q, delta) + 1.0, delta)
                cur_m, cur_w = m, w
        out_m.append(cur_m)
        out_w.append(cur_w)
        return np.array(out_m), np.array(out_w)

    def merge(self, other):
        self._check_mergeable(other)
        if other.count == 0:
            return self.copy()
        if self.count == 0:
            return other.copy()
        out = TDigest(self.compression)
        for src in (self, other):
            src.flush()
            out.min = min(out.min, src.min)
            out.max = max(out.max, src.max)
        out.count = self.count + other.count
        out.means, out.weights = out._compress(
            np.concatenate([self.means, other.means]),
            np.concatenate([self.weights, other.weights]),
        )
        return out

    def copy(self):
        self.flush()
        out = TDigest(self.compression)
        out.means, out.weights = self.means.copy(), self.weights.copy()
        out.min, out.max, out.count = self.min, self.max, self.count
        return out

    @classmethod
    def from_centroids(cls, compression, means, weights, lo, hi):
        out = cls(compression)
        out.means = np.asarray(means, dtype=float)
        out.weights = np.asarray(weights, dtype=float)
        out.count = int(round(out.weights.sum()))
        out.min, out.max = float(lo), float(hi)
        return out

    def centroids(self):
        self.flush()
        return self.means, self.weights

    def _query(self, q):
        self.flush()
        means, weights = self.means, self.weights
        total = float(self.count)
        # The r-th smallest value occupies weight interval [r - 1, r); aim at its middle.
        index = target_rank(q, self.count) - 0.5
        n = means.size

        if n == 1 or self.min == self.max:
            if self.min == self.max:
                return self.min
            return self.min + (self.max - self.min) * index / total
        if index < 1:
            return self.min
        if weights[0] > 1 and index < weights[0] / 2:
            return self.min + (index - 1) / (weights[0] / 2 - 1) * (means[0] - self.min)
        if index > total - 1:
            return self.max
        if weights[-1] > 1 and total - index <= weights[-1] / 2:
            return self.max - (total - index - 1) / (weights[-1] / 2 - 1) * (self.max - means[-1])

        weight_so_far = weights[0] / 2
        for i in range(n - 1):
            dw = (weights[i] + weights[i + 1]) / 2
            if weight_so_far + dw > index:
                left_unit = 0.0
                if weights[i] == 1:
                    if index - weight_so_far < 0.5:
                        return means[i]
                    left_unit = 0.5
                right_unit = 0.0
                if weights[i + 1] == 1:
                    if weight_so_far + dw - index <= 0.5:
                        return means[i + 1]
                    right_unit = 0.5
                z1 = index - weight_so_far - left_unit
                z2 = weight_so_far + dw - index - right_unit
                return _weighted_average(means[i], z2, means[i + 1], z1)
            weight_so_far += dw
        return self.max
