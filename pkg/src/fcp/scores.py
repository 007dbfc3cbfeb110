"""Softmax handling, temperature scaling and conformal score functions.

Three nonconformity scores are provided, all of which are "lower is more
conforming":

* ``LAC``  -- one minus the probability of the label.
* ``APS``  -- cumulative probability of the classes ranked at or above the
  label when classes are sorted by descending probability.
* ``RAPS`` -- APS plus ``penalty * max(0, rank - rank_threshold)``.

Sorting ties are broken by ascending class index everywhere so that every
function here is deterministic.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import logsumexp

from .errors import DegenerateCalibrationWarning, InvalidInputError

PROB_SUM_TOL = 1e-9

TEMPERATURE_BOUNDS = (0.01, 100.0)


class ScoreKind(str, enum.Enum):
    LAC = "lac"
    APS = "aps"
    RAPS = "raps"


@dataclass(frozen=True)
class ScoreFunctionSpec:
    """Which score function to use, with the RAPS regularisation knobs.

    ``raps_penalty`` is added once per rank beyond ``raps_rank_threshold``;
    both are ignored for LAC and APS.
    """

    kind: ScoreKind = ScoreKind.LAC
    raps_penalty: float = 0.001
    raps_rank_threshold: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", ScoreKind(self.kind))
        if not (self.raps_penalty >= 0 and math.isfinite(self.raps_penalty)):
            raise InvalidInputError("raps_penalty must be a finite non-negative number")
        if int(self.raps_rank_threshold) != self.raps_rank_threshold or self.raps_rank_threshold < 1:
            raise InvalidInputError("raps_rank_threshold must be an integer >= 1")

    @classmethod
    def parse(cls, text: str) -> "ScoreFunctionSpec":
        """Parse ``"lac"``, ``"aps"``, ``"raps"`` or ``"raps:<penalty>:<rank>"``."""
        parts = str(text).strip().lower().split(":")
        try:
            kind = ScoreKind(parts[0])
        except ValueError:
            raise InvalidInputError(f"unknown score function {parts[0]!r}") from None
        if kind is not ScoreKind.RAPS:
            if len(parts) > 1:
                raise InvalidInputError(f"{kind.value} takes no parameters")
            return cls(kind)
        penalty = float(parts[1]) if len(parts) > 1 else 0.001
        rank = int(parts[2]) if len(parts) > 2 else 1
        return cls(kind, penalty, rank)

    def __str__(self):
        if self.kind is ScoreKind.RAPS:
            return f"raps:{self.raps_penalty:g}:{self.raps_rank_threshold}"
        return self.kind.value


@dataclass(frozen=True)
class PredictionSet:
    labels: frozenset
    threshold: float
    # True when no label passed the threshold and the argmax class was added.
    forced_top1: bool = False

    def __contains__(self, label):
        return label in self.labels

    def __len__(self):
        return len(self.labels)


def validate_probs(probs) -> np.ndarray:
    """Return ``probs`` as a float array after checking it is a distribution.

    Accepts one vector of shape ``(J,)`` or a batch of shape ``(n, J)``.
    Rows are rejected, not renormalised, when they do not sum to one.
    """
    p = np.asarray(probs, dtype=float)
    if p.ndim not in (1, 2) or p.shape[-1] < 2:
        raise InvalidInputError(f"probability vectors need at least 2 classes, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise InvalidInputError("probabilities must lie in [0, 1]")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > PROB_SUM_TOL):
        raise InvalidInputError("probabilities must sum to 1")
    return p


def _validate_logits(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    if z.ndim not in (1, 2) or z.shape[-1] < 2:
        raise InvalidInputError(f"logit vectors need at least 2 classes, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("logits must be finite")
    return z


def _validate_temperature(temperature):
    if not (math.isfinite(temperature) and temperature > 0):
        raise InvalidInputError(f"temperature must be positive and finite, got {temperature}")


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Numerically stable softmax of ``logits / temperature`` along the last axis."""
    z = _validate_logits(logits)
    _validate_temperature(temperature)
    z = z / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def nll(logits, labels, temperature: float = 1.0) -> float:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits / T)``."""
    z = np.atleast_2d(np.asarray(logits, dtype=float)) / temperature
    y = np.asarray(labels, dtype=int)
    return float(np.mean(logsumexp(z, axis=1) - z[np.arange(len(y)), y]))


def fit_temperature(logits, labels, xatol: float = 1e-4) -> float:
    """Learn a softmax temperature by minimising NLL over ``log T``.

    The search is bounded to ``TEMPERATURE_BOUNDS``. When the calibration data
    holds a single distinct label the likelihood has no interior optimum, so
    ``1.0`` is returned and a :class:`DegenerateCalibrationWarning` is issued.
    """
    z = _validate_logits(logits)
    z = np.atleast_2d(z)
    y = np.asarray(labels, dtype=int).ravel()
    if len(y) != len(z):
        raise InvalidInputError("logits and labels differ in length")
    if len(y) < 2:
        raise InvalidInputError("temperature fitting needs at least 2 examples")
    if np.any(y < 0) or np.any(y >= z.shape[1]):
        raise InvalidInputError("label out of range")
    if len(np.unique(y)) < 2:
        warnings.warn(
            "calibration set has a single label; using temperature 1",
            DegenerateCalibrationWarning,
            stacklevel=2,
        )
        return 1.0

    lo, hi = (math.log(b) for b in TEMPERATURE_BOUNDS)
    res = minimize_scalar(
        lambda u: nll(z, y, math.exp(u)),
        bounds=(lo, hi),
        method="bounded",
        options={"xatol": xatol},
    )
    return float(math.exp(res.x))


def average_temperatures(client_temps) -> float:
    temps = [float(t) for t in client_temps]
    if not temps:
        raise InvalidInputError("need at least one client temperature")
    for t in temps:
        _validate_temperature(t)
    return float(np.mean(temps))


def _descending_order(p):
    # Stable sort of -p keeps ascending class index among equal probabilities.
    return np.argsort(-p, axis=-1, kind="stable")


def all_label_scores(spec: ScoreFunctionSpec, probs) -> np.ndarray:
    """Score of every candidate label; same shape as ``probs``."""
    p = validate_probs(probs)
    if spec.kind is ScoreKind.LAC:
        return 1.0 - p

    squeeze = p.ndim == 1
    p2 = np.atleast_2d(p)
    order = _descending_order(p2)
    sorted_p = np.take_along_axis(p2, order, axis=1)
    cumulative = np.cumsum(sorted_p, axis=1)
    if spec.kind is ScoreKind.RAPS:
        ranks = np.arange(1, p2.shape[1] + 1)
        cumulative = cumulative + spec.raps_penalty * np.maximum(0, ranks - spec.raps_rank_threshold)
    out = np.empty_like(p2)
    np.put_along_axis(out, order, cumulative, axis=1)
    return out[0] if squeeze else out


def label_scores(spec: ScoreFunctionSpec, probs, labels) -> np.ndarray:
    """Score of the given label for each row of a ``(n, J)`` batch."""
    p = np.atleast_2d(validate_probs(probs))
    y = np.asarray(labels, dtype=int).ravel()
    if len(y) != len(p):
        raise InvalidInputError("probs and labels differ in length")
    if np.any(y < 0) or np.any(y >= p.shape[1]):
        raise InvalidInputError("label out of range")
    return all_label_scores(spec, p)[np.arange(len(y)), y]


def score(spec: ScoreFunctionSpec, probs, label: int) -> float:
    p = validate_probs(probs)
    if p.ndim != 1:
        raise InvalidInputError("score() takes a single probability vector")
    if not (0 <= int(label) < p.shape[0]) or int(label) != label:
        raise InvalidInputError(f"label {label} out of range for {p.shape[0]} classes")
    return float(all_label_scores(spec, p)[int(label)])


def prediction_set_masks(spec: ScoreFunctionSpec, probs, threshold: float):
    """Vectorised set construction.

    Returns ``(mask, forced)`` where ``mask[i, y]`` says label ``y`` is in the
    set for row ``i`` and ``forced[i]`` marks rows rescued by the non-empty rule.
    """
    if math.isnan(threshold):
        raise InvalidInputError("threshold must not be NaN")
    p = np.atleast_2d(validate_probs(probs))
    mask = all_label_scores(spec, p) <= threshold
    forced = ~mask.any(axis=1)
    if forced.any():
        # argmax returns the first maximum, i.e. the smallest class index.
        mask[forced, np.argmax(p[forced], axis=1)] = True
    return mask, forced


def build_prediction_set(spec: ScoreFunctionSpec, probs, threshold: float) -> PredictionSet:
    p = validate_probs(probs)
    if p.ndim != 1:
        raise InvalidInputError("build_prediction_set() takes a single probability vector")
    mask, forced = prediction_set_masks(spec, p, threshold)
    labels = frozenset(int(y) for y in np.flatnonzero(mask[0]))
    return PredictionSet(labels, float(threshold), bool(forced[0]))
