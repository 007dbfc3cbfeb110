from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .._numeric import safe_ceil
from ..errors import EmptySketchError, InvalidInputError


class SketchName(str, enum.Enum):
    EXACT = "exact"
    TDIGEST = "tdigest"
    DDSKETCH = "ddsketch"
    MEAN = "mean"


DEFAULT_COMPRESSION = 100.0
DEFAULT_RELATIVE_ACCURACY = 0.01


@dataclass(frozen=True)
class SketchKind:
    """Sketch family plus its single tuning parameter.

    ``parameter`` is the compression for T-Digest, the relative accuracy for
    DDSketch, and unused (``0.0``) for the exact and mean baselines.
    """

    name: SketchName
    parameter: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "name", SketchName(self.name))
        p = float(self.parameter)
        if self.name is SketchName.TDIGEST and not (p >= 10 and math.isfinite(p)):
            raise InvalidInputError(f"T-Digest compression must be >= 10, got {p}")
        if self.name is SketchName.DDSKETCH and not (0 < p <= 0.5):
            raise InvalidInputError(f"DDSketch relative accuracy must be in (0, 0.5], got {p}")
        if self.name in (SketchName.EXACT, SketchName.MEAN):
            p = 0.0
        object.__setattr__(self, "parameter", p)

    @classmethod
    def exact(cls):
        return cls(SketchName.EXACT)

    @classmethod
    def tdigest(cls, compression=DEFAULT_COMPRESSION):
        return cls(SketchName.TDIGEST, compression)

    @classmethod
    def ddsketch(cls, relative_accuracy=DEFAULT_RELATIVE_ACCURACY):
        return cls(SketchName.DDSKETCH, relative_accuracy)

    @classmethod
    def mean_of_client_quantiles(cls):
        return cls(SketchName.MEAN)

    @classmethod
    def parse(cls, text: str) -> "SketchKind":
        """Parse ``"exact"``, ``"mean"``, ``"tdigest[:compression]"`` or ``"ddsketch[:accuracy]"``."""
        name, _, param = str(text).strip().lower().partition(":")
        try:
            sname = SketchName(name)
        except ValueError:
            raise InvalidInputError(f"unknown sketch kind {name!r}") from None
        if param:
            return cls(sname, float(param))
        if sname is SketchName.TDIGEST:
            return cls.tdigest()
        if sname is SketchName.DDSKETCH:
            return cls.ddsketch()
        return cls(sname)

    @property
    def certified(self) -> bool:
        """Whether a rank-error guarantee (and hence coverage) attaches to this kind."""
        return self.name is not SketchName.MEAN

    def __str__(self):
        if self.name in (SketchName.TDIGEST, SketchName.DDSKETCH):
            return f"{self.name.value}:{self.parameter:g}"
        return self.name.value


def check_value(value) -> float:
    v = float(value)
    if not math.isfinite(v):
        raise InvalidInputError(f"sketch values must be finite, got {value}")
    return v


def check_values(values) -> np.ndarray:
    v = np.asarray(values, dtype=float).ravel()
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("sketch values must be finite")
    return v


def target_rank(q: float, count: int) -> int:
    """1-based rank ``ceil(q * count)`` clamped into ``[1, count]``."""
    if not (0.0 < q <= 1.0):
        raise InvalidInputError(f"quantile level must lie in (0, 1], got {q}")
    return min(max(safe_ceil(q * count), 1), count)


class QuantileSketch:
    """Common interface of all mergeable quantile summaries.

    Subclasses implement ``add``, ``extend``, ``merge``, ``_query`` and ``copy``.
    ``merge`` never mutates its operands.
    """

    kind: SketchKind

    def __init__(self):
        self.count = 0

    def add(self, value):
        raise NotImplementedError

    def extend(self, values):
        for v in values:
            self.add(v)
        return self

    def merge(self, other: "QuantileSketch") -> "QuantileSketch":
        raise NotImplementedError

    def copy(self) -> "QuantileSketch":
        raise NotImplementedError

    def query(self, q: float) -> float:
        """Approximate value at rank ``ceil(q * count)``."""
        if self.count == 0:
            raise EmptySketchError(f"cannot query an empty {self.kind} sketch")
        return float(self._query(q))

    def _query(self, q):
        raise NotImplementedError

    def _check_mergeable(self, other):
        if not isinstance(other, QuantileSketch) or other.kind != self.kind:
            raise InvalidInputError(
                f"cannot merge {getattr(other, 'kind', type(other).__name__)} into {self.kind}"
            )

    def __len__(self):
        return self.count

    def __repr__(self):
        return f"<{type(self).__name__} {self.kind} count={self.count}>"


class ExactSketch(QuantileSketch):
    """Keeps every value; queries are exact order statistics."""

    def __init__(self, values=()):
        super().__init__()
        self.kind = SketchKind.exact()
        self._chunks = []
        self._sorted = None
        if len(values):
            self.extend(values)

    def add(self, value):
        self._chunks.append(np.array([check_value(value)]))
        self._sorted = None
        self.count += 1
        return self

    def extend(self, values):
        v = check_values(values)
        if v.size:
            self._chunks.append(v.copy())
            self._sorted = None
            self.count += v.size
        return self

    @property
    def values(self) -> np.ndarray:
        """Inserted values in insertion order."""
        if not self._chunks:
            return np.empty(0)
        if len(self._chunks) > 1:
            self._chunks = [np.concatenate(self._chunks)]
        return self._chunks[0]

    def sorted_values(self) -> np.ndarray:
        if self._sorted is None:
            self._sorted = np.sort(self.values, kind="stable")
        return self._sorted

    def merge(self, other):
        self._check_mergeable(other)
        out = ExactSketch()
        out.extend(self.values)
        out.extend(other.values)
        return out

    def copy(self):
        return ExactSketch(self.values)

    def _query(self, q):
        return self.sorted_values()[target_rank(q, self.count) - 1]


class MeanOfClientQuantiles(QuantileSketch):
    """Naive baseline: averages each client's exact quantile.

    Merging keeps clients separate, so the query is the unweighted mean of
    per-client quantiles. This is biased under heterogeneous clients and has
    no coverage guarantee; it exists for comparison only.
    """

    def __init__(self, values=()):
        super().__init__()
        self.kind = SketchKind.mean_of_client_quantiles()
        self.clients = []
        if len(values):
            self.extend(values)

    def _current(self):
        if not self.clients:
            self.clients.append(ExactSketch())
        return self.clients[-1]

    def add(self, value):
        self._current().add(value)
        self.count += 1
        return self

    def extend(self, values):
        v = check_values(values)
        if v.size:
            self._current().extend(v)
            self.count += v.size
        return self

    def merge(self, other):
        self._check_mergeable(other)
        out = MeanOfClientQuantiles()
        out.clients = [c.copy() for c in self.clients + other.clients if c.count]
        out.count = self.count + other.count
        return out

    def copy(self):
        out = MeanOfClientQuantiles()
        out.clients = [c.copy() for c in self.clients]
        out.count = self.count
        return out

    def _query(self, q):
        return float(np.mean([c.query(q) for c in self.clients if c.count]))
