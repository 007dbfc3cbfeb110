"""Quantile-selection rules for federated conformal calibration.

Ranks are 1-based positions in the ascending sort of the pooled calibration
scores: rank ``r`` selects the ``r``-th smallest score. A rank larger than the
number of scores means no finite threshold achieves the target coverage; such
results are *vacuous* and carry an infinite threshold.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._numeric import CEIL_SLACK, safe_ceil
from .errors import InvalidInputError, VacuousQuantileWarning


class Rule(str, enum.Enum):
    FEDERATED = "federated"
    IID = "iid"
    ROBUST = "robust"
    UNIFORM = "uniform"
    DP = "dp"
    SINGLE_CLIENT = "single"
    WEIGHTED = "weighted"


@dataclass(frozen=True)
class QuantileResult:
    threshold: float
    rank: int
    vacuous: bool
    rule: Rule
    # Rule-specific diagnostics, e.g. the coverage-gap estimate of the uniform rule.
    extras: dict = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class MixtureWeights:
    """Test-time mixture weights over clients plus the uncertainty level ``delta``."""

    weights: tuple
    uncertainty_delta: float = 0.0

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        object.__setattr__(self, "weights", w)
        if not w or any(x < 0 or not math.isfinite(x) for x in w):
            raise InvalidInputError("mixture weights must be finite and non-negative")
        if abs(sum(w) - 1.0) > 1e-9:
            raise InvalidInputError(f"mixture weights must sum to 1, got {sum(w)}")
        if not (0.0 <= self.uncertainty_delta < 1.0):
            raise InvalidInputError("uncertainty_delta must lie in [0, 1)")

    @classmethod
    def proportional(cls, client_sizes, uncertainty_delta=0.0):
        """Weights proportional to ``n_k + 1``."""
        sizes = np.asarray(client_sizes, dtype=float) + 1.0
        return cls(tuple(sizes / sizes.sum()), uncertainty_delta)

    @classmethod
    def uniform(cls, k, uncertainty_delta=0.0):
        return cls(tuple([1.0 / k] * k), uncertainty_delta)

    def __len__(self):
        return len(self.weights)


def as_client_scores(per_client) -> list:
    """Validate calibration scores given as one sequence per client."""
    clients = [np.asarray(s, dtype=float).ravel() for s in per_client]
    if not clients:
        raise InvalidInputError("need at least one client")
    for k, s in enumerate(clients):
        if s.size == 0:
            raise InvalidInputError(f"client {k} has no calibration scores")
        if not np.all(np.isfinite(s)) or np.any(s < 0):
            raise InvalidInputError(f"client {k} has negative or non-finite scores")
    return clients


def _check_alpha(alpha):
    if not (0.0 < alpha < 1.0):
        raise InvalidInputError(f"alpha must lie in (0, 1), got {alpha}")


def federated_rank(n_total: int, n_clients: int, alpha: float):
    """Return ``(rank, vacuous)`` with ``rank = ceil((1 - alpha)(N + K))``."""
    _check_alpha(alpha)
    if n_clients < 1 or n_total < n_clients:
        raise InvalidInputError("need N >= K >= 1")
    rank = safe_ceil((1.0 - alpha) * (n_total + n_clients))
    return rank, rank > n_total


def iid_rank(n_total: int, alpha: float) -> int:
    _check_alpha(alpha)
    if n_total < 1:
        raise InvalidInputError("need N >= 1")
    return safe_ceil((1.0 - alpha) * (n_total + 1))


def robust_rank(n_total: int, n_clients: int, alpha: float, delta: float):
    """Rank guaranteeing coverage when each true weight is at least
    ``(1 - delta)`` times its nominal ``(n_k + 1)/(N + K)``."""
    _check_alpha(alpha)
    if n_clients < 1 or n_total < n_clients:
        raise InvalidInputError("need N >= K >= 1")
    if not (0.0 <= delta < 1.0):
        raise InvalidInputError("delta must lie in [0, 1)")
    rank = safe_ceil((n_total + n_clients) * (1.0 - alpha) / (1.0 - delta))
    return rank, rank > n_total


def vacuity_alpha(n_total: int, n_clients: int) -> float:
    """Smallest alpha for which the federated rank can be non-vacuous."""
    return 1.0 / (n_total / n_clients + 1.0)


def exact_quantile(scores, rank: int, rule: Rule = Rule.FEDERATED) -> QuantileResult:
    """The ``rank``-th smallest of the pooled scores.

    ``scores`` may be a flat sequence or one sequence per client; pooling
    discards the client boundaries either way.
    """
    rank = int(rank)
    if rank < 1:
        raise InvalidInputError(f"rank must be >= 1, got {rank}")
    pooled = _pool(scores)
    if rank > pooled.size:
        return QuantileResult(math.inf, rank, True, rule)
    value = np.partition(pooled, rank - 1)[rank - 1]
    return QuantileResult(float(value), rank, False, rule)


def _pool(scores):
    if isinstance(scores, np.ndarray) and scores.ndim == 1:
        return scores.astype(float)
    items = list(scores)
    if items and np.ndim(items[0]) == 0:
        return np.asarray(items, dtype=float)
    return np.concatenate([np.asarray(s, dtype=float).ravel() for s in items])


def _counts_at_candidates(clients):
    """Sorted pooled candidates and per-client counts ``m_k(q)`` at each one.

    Returns ``(candidates, counts)`` where ``counts[k, j]`` is the number of
    client-``k`` scores ``<= candidates[j]``.
    """
    candidates = np.sort(np.concatenate(clients), kind="stable")
    counts = np.vstack([np.searchsorted(np.sort(s), candidates, side="right") for s in clients])
    return candidates, counts


def _first_satisfying(candidates, ok, rule, extras):
    hits = np.flatnonzero(ok)
    n = candidates.size
    if hits.size == 0:
        return QuantileResult(math.inf, n + 1, True, rule, extras)
    j = int(hits[0])
    return QuantileResult(float(candidates[j]), j + 1, False, rule, extras)


def lower_envelope_coverage(counts, sizes, delta):
    """Worst-case coverage ``min over Lambda of sum_k lam_k m_k / (n_k + 1)``.

    ``Lambda`` is the lower-bounded simplex ``lam_k >= (1 - delta)(n_k + 1)/(N + K)``.
    The minimum puts every free unit of mass on the client with the smallest
    ``m_k / (n_k + 1)``.
    """
    sizes = np.asarray(sizes, dtype=float)
    c = counts / (sizes[:, None] + 1.0)
    lower = (1.0 - delta) * (sizes + 1.0) / (sizes.sum() + sizes.size)
    return lower @ c + (1.0 - lower.sum()) * c.min(axis=0)


def weighted_robust_quantile(scores, weights: MixtureWeights, alpha: float) -> QuantileResult:
    """Smallest pooled score whose worst-case mixture coverage reaches ``1 - alpha``."""
    _check_alpha(alpha)
    clients = as_client_scores(scores)
    if len(weights) != len(clients):
        raise InvalidInputError(f"{len(weights)} weights for {len(clients)} clients")
    sizes = np.array([s.size for s in clients])
    delta = weights.uncertainty_delta
    lower = (1.0 - delta) * (sizes + 1.0) / (sizes.sum() + sizes.size)
    if np.any(np.asarray(weights.weights) < lower - 1e-12):
        warnings.warn(
            "mixture weights fall outside the uncertainty set; coverage is not guaranteed",
            stacklevel=2,
        )
    candidates, counts = _counts_at_candidates(clients)
    worst = lower_envelope_coverage(counts, sizes, delta)
    slack = CEIL_SLACK / (sizes.sum() + sizes.size)
    return _first_satisfying(candidates, worst >= (1.0 - alpha) - slack, Rule.WEIGHTED, {})


def uniform_weight_quantile(scores, alpha: float) -> QuantileResult:
    """Smallest pooled score with ``mean_k m_k(q)/(n_k + 1) >= 1 - alpha``.

    ``extras["coverage_gap"]`` holds ``mean_k 1/(n_k + 1)``, the width of the
    coverage band under equal client weights.
    """
    _check_alpha(alpha)
    clients = as_client_scores(scores)
    sizes = np.array([s.size for s in clients], dtype=float)
    candidates, counts = _counts_at_candidates(clients)
    cov = (counts / (sizes[:, None] + 1.0)).mean(axis=0)
    extras = {"coverage_gap": float(np.mean(1.0 / (sizes + 1.0)))}
    slack = CEIL_SLACK / (sizes.sum() + sizes.size)
    return _first_satisfying(candidates, cov >= (1.0 - alpha) - slack, Rule.UNIFORM, extras)


def dp_rank_probabilities(n_total: int, alpha: float, privacy: float) -> np.ndarray:
    """Exponential-mechanism distribution over ranks ``1..N``.

    ``P(r) ∝ exp(-privacy * |r - (1 - alpha) N| / 2)``.
    """
    _check_alpha(alpha)
    if not (privacy > 0 and math.isfinite(privacy)):
        raise InvalidInputError("privacy must be positive and finite")
    if n_total < 1:
        raise InvalidInputError("need N >= 1")
    ranks = np.arange(1, n_total + 1)
    log_w = -privacy * np.abs(ranks - (1.0 - alpha) * n_total) / 2.0
    w = np.exp(log_w - log_w.max())
    return w / w.sum()


def sample_dp_ranks(n_total, alpha, privacy, rng, size=None):
    """Draw ranks by inverse CDF over the exponential-mechanism weights."""
    cdf = np.cumsum(dp_rank_probabilities(n_total, alpha, privacy))
    u = rng.random(size)
    idx = np.searchsorted(cdf, u * cdf[-1], side="right")
    return np.minimum(idx, n_total - 1) + 1


def dp_quantile(scores, alpha: float, privacy: float, rng_seed: int) -> QuantileResult:
    """Differentially private threshold: a sampled rank, then an exact order statistic."""
    pooled = _pool(scores)
    rng = np.random.default_rng(rng_seed)
    rank = int(sample_dp_ranks(pooled.size, alpha, privacy, rng))
    result = exact_quantile(pooled, rank, Rule.DP)
    return QuantileResult(result.threshold, rank, False, Rule.DP, {"privacy": privacy})


def warn_if_vacuous(n_total, n_clients, alpha):
    if alpha < vacuity_alpha(n_total, n_clients):
        warnings.warn(
            f"alpha={alpha} is below 1/(N/K + 1)={vacuity_alpha(n_total, n_clients):.4g}; "
            "the federated quantile is vacuous and prediction sets will be full",
            VacuousQuantileWarning,
            stacklevel=3,
        )
