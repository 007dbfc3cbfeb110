"""End-to-end federated calibration over simulated clients.

Each client scores its calibration data with the shared model, summarises the
scores in a sketch and ships the serialized sketch to the server. The server
merges the sketches and reads off the threshold at the rank prescribed by the
quantile rule. Prediction sets then keep every label whose score is at most
the threshold.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import quantile as qr
from .errors import DegenerateCalibrationWarning, InvalidInputError
from .model import ClientData, Examples
from .quantile import MixtureWeights, Rule
from .scores import (
    ScoreFunctionSpec,
    average_temperatures,
    build_prediction_set,
    fit_temperature,
    label_scores,
    prediction_set_masks,
    softmax,
)
from .sketch import SketchKind, deserialize, make_sketch, merge_all, serialize


@dataclass(frozen=True)
class QuantileRule:
    """A quantile rule plus its parameter, if any.

    ``delta`` is the weight uncertainty for the robust and weighted rules,
    ``privacy`` the exponential-mechanism parameter for DP, and ``client`` the
    index used by single-client calibration.
    """

    rule: Rule = Rule.FEDERATED
    delta: float = 0.0
    privacy: float = None
    client: int = None

    def __post_init__(self):
        object.__setattr__(self, "rule", Rule(self.rule))
        if self.rule in (Rule.ROBUST, Rule.WEIGHTED) and not (0.0 <= self.delta < 1.0):
            raise InvalidInputError("delta must lie in [0, 1)")
        if self.rule is Rule.DP and not (self.privacy is not None and self.privacy > 0):
            raise InvalidInputError("the dp rule needs a positive privacy parameter")
        if self.rule is Rule.SINGLE_CLIENT and (self.client is None or self.client < 0):
            raise InvalidInputError("the single rule needs a client index")

    @classmethod
    def parse(cls, text: str) -> "QuantileRule":
        """Parse ``federated``, ``iid``, ``uniform``, ``robust:<delta>``,
        ``weighted:<delta>``, ``dp:<privacy>`` or ``single:<client>``."""
        name, _, arg = str(text).strip().lower().partition(":")
        try:
            rule = Rule(name)
        except ValueError:
            raise InvalidInputError(f"unknown quantile rule {name!r}") from None
        try:
            if rule in (Rule.ROBUST, Rule.WEIGHTED):
                return cls(rule, delta=float(arg) if arg else 0.0)
            if rule is Rule.DP:
                return cls(rule, privacy=float(arg) if arg else None)
            if rule is Rule.SINGLE_CLIENT:
                return cls(rule, client=int(arg) if arg else 0)
        except ValueError:
            raise InvalidInputError(f"bad parameter in quantile rule {text!r}") from None
        if arg:
            raise InvalidInputError(f"rule {name} takes no parameter")
        return cls(rule)

    def __str__(self):
        if self.rule in (Rule.ROBUST, Rule.WEIGHTED):
            return f"{self.rule.value}:{self.delta:g}"
        if self.rule is Rule.DP:
            return f"dp:{self.privacy:g}"
        if self.rule is Rule.SINGLE_CLIENT:
            return f"single:{self.client}"
        return self.rule.value


@dataclass(frozen=True)
class FederationPlan:
    class_sets: tuple
    calibration_sizes: tuple
    alpha: float = 0.1
    score_spec: ScoreFunctionSpec = field(default_factory=ScoreFunctionSpec)
    rule: QuantileRule = field(default_factory=QuantileRule)
    sketch_kind: SketchKind = field(default_factory=SketchKind.exact)
    seed: int = 0
    temperature_scaling: bool = True
    # Test-time mixture; None means weights proportional to n_k + 1.
    mixture: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "class_sets", tuple(tuple(sorted(int(c) for c in cs)) for cs in self.class_sets))
        object.__setattr__(self, "calibration_sizes", tuple(int(n) for n in self.calibration_sizes))
        if len(self.class_sets) != len(self.calibration_sizes) or not self.class_sets:
            raise InvalidInputError("need one class set and one calibration size per client")
        if any(not cs for cs in self.class_sets):
            raise InvalidInputError("class sets must be non-empty")
        if any(n < 1 for n in self.calibration_sizes):
            raise InvalidInputError("every client needs at least one calibration example")
        if not (0.0 < self.alpha < 1.0):
            raise InvalidInputError("alpha must lie in (0, 1)")
        if self.rule.rule is Rule.SINGLE_CLIENT and self.rule.client >= self.n_clients:
            raise InvalidInputError(f"single-client index {self.rule.client} out of range")

    @property
    def n_clients(self):
        return len(self.class_sets)

    @property
    def n_total(self):
        return sum(self.calibration_sizes)

    def mixture_weights(self) -> MixtureWeights:
        delta = self.rule.delta if self.rule.rule in (Rule.ROBUST, Rule.WEIGHTED) else 0.0
        if self.mixture is None:
            return MixtureWeights.proportional(self.calibration_sizes, delta)
        return MixtureWeights(tuple(self.mixture), delta)


def make_partitions(n_classes, n_clients, classes_per_client, seed=0, allow_uncovered=False):
    """Assign each client a set of classes.

    Classes are shuffled once under ``seed`` and dealt out cyclically, so
    ``classes_per_client * n_clients == n_classes`` yields disjoint sets that
    cover every class and ``classes_per_client == n_classes`` gives every
    client all classes.
    """
    if not (1 <= classes_per_client <= n_classes):
        raise InvalidInputError("classes_per_client must lie in [1, n_classes]")
    if n_clients < 1:
        raise InvalidInputError("need at least one client")
    if classes_per_client * n_clients < n_classes and not allow_uncovered:
        raise InvalidInputError(
            f"{n_clients} clients x {classes_per_client} classes cannot cover {n_classes} classes"
        )
    perm = np.random.default_rng([seed, 0xC1A5]).permutation(n_classes)
    return [
        tuple(sorted({int(perm[(k * classes_per_client + j) % n_classes]) for j in range(classes_per_client)}))
        for k in range(n_clients)
    ]


@dataclass(frozen=True)
class ScoreCalibration:
    """Server-side outcome of aggregating client scores."""

    threshold: float
    rank: int
    vacuous: bool
    rule: QuantileRule
    n_total: int
    n_clients: int
    sketch_bytes: int = 0
    # Merged sketch the threshold was read from; None for rules computed on raw scores.
    sketch: object = field(default=None, compare=False, repr=False)

    @property
    def level(self):
        """Quantile level ``rank / N`` passed to the sketch, clamped to (0, 1]."""
        return min(self.rank / self.n_total, 1.0)


def _communicate(client_scores, kind):
    """Build, serialize and decode one sketch per client; returns (sketches, bytes)."""
    decoded, total = [], 0
    for k, s in enumerate(client_scores):
        env = serialize(make_sketch(kind, s), client_id=str(k))
        total += env.byte_length
        decoded.append(deserialize(env))
    return decoded, total


def calibrate_scores(client_scores, alpha, rule: QuantileRule = None, sketch_kind: SketchKind = None,
                     seed=0, mixture: MixtureWeights = None) -> ScoreCalibration:
    """Threshold from per-client calibration scores under ``rule``.

    Rank-based rules read the merged sketch at level ``rank / N``. A rank
    beyond ``N`` short-circuits to an infinite threshold. The uniform and
    weighted rules need per-client counts below each candidate, so they run on
    the raw scores; sketches are still exchanged for byte accounting.
    """
    rule = rule or QuantileRule()
    sketch_kind = sketch_kind or SketchKind.exact()
    clients = qr.as_client_scores(client_scores)
    sizes = [s.size for s in clients]
    n_total, n_clients = sum(sizes), len(clients)
    sketches, n_bytes = _communicate(clients, sketch_kind)

    def raw(result):
        return ScoreCalibration(result.threshold, result.rank, result.vacuous, rule, n_total, n_clients, n_bytes)

    if rule.rule is Rule.UNIFORM:
        return raw(qr.uniform_weight_quantile(clients, alpha))
    if rule.rule is Rule.WEIGHTED:
        weights = mixture or MixtureWeights.proportional(sizes, rule.delta)
        if weights.uncertainty_delta != rule.delta:
            weights = MixtureWeights(weights.weights, rule.delta)
        return raw(qr.weighted_robust_quantile(clients, weights, alpha))

    if rule.rule is Rule.SINGLE_CLIENT:
        if rule.client >= n_clients:
            raise InvalidInputError(f"single-client index {rule.client} out of range")
        n = sizes[rule.client]
        rank = qr.iid_rank(n, alpha)
        merged, n_total, vacuous = sketches[rule.client], n, rank > n
    else:
        if rule.rule is Rule.FEDERATED:
            rank, vacuous = qr.federated_rank(n_total, n_clients, alpha)
        elif rule.rule is Rule.IID:
            rank = qr.iid_rank(n_total, alpha)
            vacuous = rank > n_total
        elif rule.rule is Rule.ROBUST:
            rank, vacuous = qr.robust_rank(n_total, n_clients, alpha, rule.delta)
        elif rule.rule is Rule.DP:
            rng = np.random.default_rng([seed, 0xD9])
            rank, vacuous = int(qr.sample_dp_ranks(n_total, alpha, rule.privacy, rng)), False
        else:
            raise InvalidInputError(f"unsupported rule {rule}")
        merged = merge_all(sketches)

    if vacuous:
        return ScoreCalibration(math.inf, rank, True, rule, n_total, n_clients, n_bytes, merged)
    threshold = merged.query(min(rank / n_total, 1.0))
    return ScoreCalibration(float(threshold), rank, False, rule, n_total, n_clients, n_bytes, merged)


def centralized_threshold(client_scores, alpha, rule: QuantileRule = None, seed=0):
    """Reference threshold computed on pooled raw scores without any sketch."""
    rule = rule or QuantileRule()
    clients = qr.as_client_scores(client_scores)
    n_total, n_clients = sum(s.size for s in clients), len(clients)
    if rule.rule is Rule.FEDERATED:
        rank, _ = qr.federated_rank(n_total, n_clients, alpha)
    elif rule.rule is Rule.IID:
        rank = qr.iid_rank(n_total, alpha)
    elif rule.rule is Rule.ROBUST:
        rank, _ = qr.robust_rank(n_total, n_clients, alpha, rule.delta)
    elif rule.rule is Rule.DP:
        rank = int(qr.sample_dp_ranks(n_total, alpha, rule.privacy, np.random.default_rng([seed, 0xD9])))
    elif rule.rule is Rule.SINGLE_CLIENT:
        return qr.exact_quantile(clients[rule.client], qr.iid_rank(clients[rule.client].size, alpha)).threshold
    elif rule.rule is Rule.UNIFORM:
        return qr.uniform_weight_quantile(clients, alpha).threshold
    else:
        weights = MixtureWeights.proportional([s.size for s in clients], rule.delta)
        return qr.weighted_robust_quantile(clients, weights, alpha).threshold
    return qr.exact_quantile(clients, rank).threshold


@dataclass(frozen=True)
class ConformalPredictor:
    threshold: float
    rule: QuantileRule
    score_spec: ScoreFunctionSpec
    temperature: float
    vacuous: bool
    rank: int = 0
    n_total: int = 0
    n_clients: int = 0
    sketch_bytes: int = 0
    client_temperatures: tuple = ()
    degenerate_clients: tuple = ()

    def probabilities(self, model, features):
        return softmax(model.logits(features), self.temperature)

    def prediction_masks(self, model, features):
        """``(mask, forced)`` arrays for a batch of features."""
        return prediction_set_masks(self.score_spec, self.probabilities(model, features), self.threshold)


def _client_temperatures(clients, model):
    temps, degenerate = [], []
    for c in clients:
        logits = model.logits(c.calibration.features)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", DegenerateCalibrationWarning)
            if len(c.calibration) < 2:
                temps.append(1.0)
                degenerate.append(c.client_id)
                continue
            temps.append(fit_temperature(logits, c.calibration.labels))
        if any(issubclass(w.category, DegenerateCalibrationWarning) for w in caught):
            degenerate.append(c.client_id)
    return temps, degenerate


def calibrate(plan: FederationPlan, clients, model) -> ConformalPredictor:
    """Build the federated conformal predictor for ``clients``.

    Client temperatures are fitted on the calibration split and averaged
    before any score is computed; single-client calibration uses only that
    client's temperature and scores.
    """
    clients = list(clients)
    if len(clients) != plan.n_clients:
        raise InvalidInputError(f"plan has {plan.n_clients} clients but {len(clients)} were given")
    for c in clients:
        if len(c.calibration) == 0:
            raise InvalidInputError(f"client {c.client_id} has no calibration data")

    if plan.temperature_scaling:
        temps, degenerate = _client_temperatures(clients, model)
    else:
        temps, degenerate = [1.0] * len(clients), []
    if plan.rule.rule is Rule.SINGLE_CLIENT:
        temperature = temps[plan.rule.client]
    else:
        temperature = average_temperatures(temps)

    per_client = [
        label_scores(plan.score_spec, softmax(model.logits(c.calibration.features), temperature), c.calibration.labels)
        for c in clients
    ]
    result = calibrate_scores(
        per_client, plan.alpha, plan.rule, plan.sketch_kind, seed=plan.seed, mixture=plan.mixture_weights()
    )
    if result.vacuous:
        warnings.warn(
            f"rank {result.rank} exceeds N={result.n_total}; prediction sets will be full",
            qr.VacuousQuantileWarning,
            stacklevel=2,
        )
    return ConformalPredictor(
        threshold=result.threshold,
        rule=plan.rule,
        score_spec=plan.score_spec,
        temperature=float(temperature),
        vacuous=result.vacuous,
        rank=result.rank,
        n_total=result.n_total,
        n_clients=result.n_clients,
        sketch_bytes=result.sketch_bytes,
        client_temperatures=tuple(float(t) for t in temps),
        degenerate_clients=tuple(degenerate),
    )


def predict(predictor: ConformalPredictor, model, feature):
    probs = predictor.probabilities(model, np.asarray([feature]))[0]
    return build_prediction_set(predictor.score_spec, probs, predictor.threshold)


@dataclass(frozen=True)
class MixtureSample:
    features: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    client_index: np.ndarray

    def __len__(self):
        return self.labels.size

    def take(self, idx) -> "MixtureSample":
        return MixtureSample(self.features[idx], self.labels[idx], self.ids[idx], self.client_index[idx])


def sample_test_mixture(clients, weights, n_draws, seed) -> MixtureSample:
    """Draw ``n_draws`` test points: a client by ``weights``, then a uniform point from its test pool."""
    clients = list(clients)
    w = weights if isinstance(weights, MixtureWeights) else MixtureWeights(tuple(weights))
    if len(w) != len(clients):
        raise InvalidInputError(f"{len(w)} weights for {len(clients)} clients")
    for c in clients:
        if len(c.test) == 0:
            raise InvalidInputError(f"client {c.client_id} has an empty test pool")
    rng = np.random.default_rng(seed)
    p = np.asarray(w.weights)
    which = rng.choice(len(clients), size=n_draws, p=p / p.sum())
    picks = np.empty(n_draws, dtype=int)
    for k, c in enumerate(clients):
        sel = which == k
        picks[sel] = rng.integers(0, len(c.test), size=int(sel.sum()))
    offsets = np.cumsum([0] + [len(c.test) for c in clients])[:-1]
    pooled = pool_test(clients)
    return pooled.take(offsets[which] + picks)


def pool_test(clients) -> MixtureSample:
    """Every client's whole test split, tagged with its client index."""
    parts = [(k, c.test) for k, c in enumerate(clients)]
    return MixtureSample(
        np.concatenate([e.features for _, e in parts]),
        np.concatenate([e.labels for _, e in parts]),
        np.concatenate([e.ids for _, e in parts]),
        np.concatenate([np.full(len(e), k) for k, e in parts]),
    )


__all__ = [
    "ClientData",
    "ConformalPredictor",
    "Examples",
    "FederationPlan",
    "MixtureSample",
    "QuantileRule",
    "ScoreCalibration",
    "calibrate",
    "calibrate_scores",
    "centralized_threshold",
    "make_partitions",
    "pool_test",
    "predict",
    "sample_test_mixture",
]
