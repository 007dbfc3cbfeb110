"""Monte Carlo harnesses and the synthetic experiment scenarios.

Two levels are provided:

* score level -- calibration and test *scores* are drawn directly from
  per-client distributions, which isolates the quantile rules from any model;
* pipeline level -- a synthetic Gaussian task, a FedAvg linear model and the
  full calibrate / predict / evaluate loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .federation import (
    FederationPlan,
    make_partitions,
    QuantileRule,
    calibrate,
    calibrate_scores,
    sample_test_mixture,
)
from .model import SyntheticTask, accuracy, generate_clients, train_fedavg_linear
from .quantile import MixtureWeights, Rule
from .scores import ScoreFunctionSpec
from .sketch import SketchKind, achieved_epsilon


def derive_seed(*keys) -> int:
    """Stable 32-bit sub-seed from a master seed and any integer keys."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def binomial_se(p, n) -> float:
    return math.sqrt(p * (1.0 - p) / n)


def uniform_sampler(k, n, rng):
    return rng.random(n)


@dataclass
class RuleCoverage:
    rule: QuantileRule
    covered: int = 0
    n_test: int = 0
    per_replication: list = field(default_factory=list)
    thresholds: list = field(default_factory=list)
    epsilons: list = field(default_factory=list)
    vacuous: int = 0

    @property
    def coverage(self):
        return self.covered / self.n_test


@dataclass
class ScoreExperiment:
    client_sizes: tuple
    alpha: float
    sketch_kind: SketchKind
    results: dict

    @property
    def n_total(self):
        return sum(self.client_sizes)

    @property
    def n_clients(self):
        return len(self.client_sizes)

    def upper_gap(self):
        return self.n_clients / (self.n_total + self.n_clients)


EPSILON_GRID = (0.5, 0.8, 0.9, 0.95, 0.99)


def score_coverage_experiment(client_sizes, alpha, rules=None, sketch_kind=None, replications=200,
                              test_per_replication=1000, seed=0, sampler=uniform_sampler,
                              mixture=None, measure_epsilon=False) -> ScoreExperiment:
    """Estimate coverage of each rule with scores drawn straight from ``sampler``.

    Every replication draws fresh calibration scores ``sampler(k, n_k, rng)``
    per client and ``test_per_replication`` test scores from the client
    mixture (weights proportional to ``n_k + 1`` unless ``mixture`` is given).
    All rules see identical draws. With ``measure_epsilon`` the achieved rank
    error of the merged sketch is recorded for each replication, over
    ``EPSILON_GRID`` plus the level actually queried.
    """
    sizes = tuple(int(n) for n in client_sizes)
    rules = [QuantileRule.parse(r) if isinstance(r, str) else r for r in (rules or [QuantileRule()])]
    sketch_kind = sketch_kind or SketchKind.exact()
    weights = mixture or MixtureWeights.proportional(sizes)
    p = np.asarray(weights.weights)
    out = {str(r): RuleCoverage(r) for r in rules}
    for rep in range(replications):
        rng = np.random.default_rng([seed, rep])
        cal = [sampler(k, n, rng) for k, n in enumerate(sizes)]
        which = rng.choice(len(sizes), size=test_per_replication, p=p)
        test = np.empty(test_per_replication)
        for k in range(len(sizes)):
            sel = which == k
            test[sel] = sampler(k, int(sel.sum()), rng)
        for r in rules:
            res = calibrate_scores(cal, alpha, r, sketch_kind, seed=derive_seed(seed, rep))
            hits = int(np.sum(test <= res.threshold))
            acc = out[str(r)]
            acc.covered += hits
            acc.n_test += test_per_replication
            acc.per_replication.append(hits / test_per_replication)
            acc.thresholds.append(res.threshold)
            acc.vacuous += int(res.vacuous)
            if measure_epsilon and res.sketch is not None and not res.vacuous:
                pooled = np.concatenate(cal) if r.rule is not Rule.SINGLE_CLIENT else cal[r.client]
                grid = sorted(set(EPSILON_GRID) | {res.level})
                acc.epsilons.append(achieved_epsilon(res.sketch, pooled, grid))
    return ScoreExperiment(sizes, alpha, sketch_kind, out)


@dataclass(frozen=True)
class SyntheticConfig:
    n_classes: int = 10
    dim: int = 2
    separation: float = 3.0
    noise_sigma: float = 1.0
    n_train: int = 200
    rounds: int = 100
    local_steps: int = 5
    lr: float = 0.1
    class_means: tuple = None

    def task(self, seed) -> SyntheticTask:
        if self.class_means is not None:
            return SyntheticTask(np.asarray(self.class_means, dtype=float), self.noise_sigma, seed)
        return SyntheticTask.random(self.n_classes, self.dim, self.separation, self.noise_sigma, seed)


@dataclass
class SyntheticFederation:
    """A trained model plus the machinery to draw fresh held-out data per trial."""

    config: SyntheticConfig
    task: SyntheticTask
    class_sets: list
    model: object
    train_accuracy: float
    seed: int

    @classmethod
    def build(cls, config: SyntheticConfig, class_sets, seed=0):
        task = config.task(seed)
        train_clients = generate_clients(
            task, class_sets, [0] * len(class_sets), n_test=0, n_train=config.n_train, seed=derive_seed(seed, 1)
        )
        model = train_fedavg_linear(
            train_clients, task.n_classes, config.rounds, config.local_steps, config.lr, seed=derive_seed(seed, 2)
        )
        acc = float(np.mean([accuracy(model, c.train) for c in train_clients]))
        return cls(config, task, [tuple(c) for c in class_sets], model, acc, seed)

    def holdout(self, calibration_sizes, n_test, trial):
        """Fresh calibration and test pools for one trial."""
        return generate_clients(
            self.task, self.class_sets, calibration_sizes, n_test=n_test, n_train=0,
            seed=derive_seed(self.seed, 3, trial),
        )


@dataclass
class TrialOutcome:
    predictor: object
    records: metrics.EvalRecords
    summary: dict


def run_trial(fed: SyntheticFederation, plan: FederationPlan, trial, n_test_pool=200, n_draws=2000,
              clients=None) -> TrialOutcome:
    """Calibrate on fresh held-out data and evaluate on mixture test draws."""
    if clients is None:
        clients = fed.holdout(plan.calibration_sizes, n_test_pool, trial)
    predictor = calibrate(plan, clients, fed.model)
    sample = sample_test_mixture(
        clients, MixtureWeights.proportional(plan.calibration_sizes) if plan.mixture is None else plan.mixture,
        n_draws, derive_seed(plan.seed, 4, trial),
    )
    records = metrics.evaluate(predictor, fed.model, sample, [c.client_id for c in clients])
    summary = metrics.summarize(records, fed.task.n_classes)
    summary["per_client_coverage"] = metrics.per_client_coverage(records)
    return TrialOutcome(predictor, records, summary)


def mean_over(outcomes, key):
    return float(np.mean([o.summary[key] for o in outcomes]))


# Label-disjoint scenario: client 0 owns two well separated classes, client 1
# owns two heavily overlapping ones, so a threshold calibrated on client 0
# alone is far too small for client 1.
DISJOINT_MEANS = ((-6.0, 0.0), (6.0, 0.0), (0.0, 6.0), (0.0, 6.25))


def single_client_scenario(alpha=0.1, n_cal=500, trials=200, n_draws=250, seed=0):
    """Coverage of single-client versus federated calibration on label-disjoint clients."""
    config = SyntheticConfig(n_classes=4, class_means=DISJOINT_MEANS, noise_sigma=1.0)
    class_sets = [(0, 1), (2, 3)]
    fed = SyntheticFederation.build(config, class_sets, seed)
    out = {}
    for name, rule in (("single", QuantileRule(Rule.SINGLE_CLIENT, client=0)), ("federated", QuantileRule())):
        plan = FederationPlan(class_sets, (n_cal, n_cal), alpha, rule=rule, seed=seed)
        outcomes = [run_trial(fed, plan, t, n_test_pool=n_cal, n_draws=n_draws) for t in range(trials)]
        records = _concat_records([o.records for o in outcomes])
        out[name] = {
            "coverage": metrics.coverage(records),
            "per_client_coverage": metrics.per_client_coverage(records),
            "n": len(records),
            "mean_size": metrics.mean_size(records),
        }
    return out


def _concat_records(parts):
    return metrics.EvalRecords(
        np.concatenate([p.example_id for p in parts]),
        np.concatenate([p.true_label for p in parts]),
        np.concatenate([p.set_size for p in parts]),
        np.concatenate([p.covered for p in parts]),
        np.concatenate([p.top1_correct for p in parts]),
        np.concatenate([p.client_of_origin for p in parts]),
    )


SKETCH_METHODS = ("exact", "tdigest:100", "ddsketch:0.01", "mean")
ALPHA_GRID = tuple(round(0.05 * i, 2) for i in range(1, 11))

# Label-disjoint clients of very different difficulty: clients 0-2 hold
# separated pairs, clients 3-4 hold overlapping ones.
COMPARE_MEANS = (
    (-8.0, -8.0), (-8.0, 8.0),
    (8.0, -8.0), (8.0, 8.0),
    (0.0, -12.0), (0.0, 12.0),
    (-2.0, 0.0), (-1.0, 0.0),
    (1.0, 0.0), (2.0, 0.0),
)


def sketch_comparison(alphas=ALPHA_GRID, methods=SKETCH_METHODS, n_clients=5, n_cal=200, trials=20,
                      n_draws=4000, score="lac", seed=0, config=None):
    """Coverage versus alpha for each distributed quantile method on identical data.

    Returns a list of rows ``{method, alpha, coverage, mean_size, se}``.
    """
    config = config or SyntheticConfig(n_classes=10, class_means=COMPARE_MEANS, noise_sigma=1.0)
    class_sets = [(2 * k, 2 * k + 1) for k in range(n_clients)]
    fed = SyntheticFederation.build(config, class_sets, seed)
    spec = ScoreFunctionSpec.parse(score)
    sizes = (n_cal,) * n_clients
    tallies = {(m, a): [0, 0, 0.0] for m in methods for a in alphas}
    for t in range(trials):
        clients = fed.holdout(sizes, n_cal, t)
        sample = sample_test_mixture(clients, MixtureWeights.proportional(sizes), n_draws, derive_seed(seed, 5, t))
        for m in methods:
            for a in alphas:
                plan = FederationPlan(class_sets, sizes, a, score_spec=spec,
                                      sketch_kind=SketchKind.parse(m), seed=derive_seed(seed, t))
                predictor = calibrate(plan, clients, fed.model)
                rec = metrics.evaluate(predictor, fed.model, sample)
                tally = tallies[(m, a)]
                tally[0] += int(rec.covered.sum())
                tally[1] += len(rec)
                tally[2] += float(rec.set_size.sum())
    rows = []
    for (m, a), (hits, n, size_sum) in tallies.items():
        cov = hits / n
        rows.append({"method": m, "alpha": a, "coverage": cov, "mean_size": size_sum / n,
                     "se": binomial_se(1 - a, n)})
    return rows


def dp_sweep(privacies, alpha=0.1, n_clients=5, n_cal=100, trials=50, n_draws=2000, seed=0, config=None):
    """Coverage and set size of the DP rule across privacy levels, plus the non-private reference."""
    config = config or SyntheticConfig()
    class_sets = [(2 * k, 2 * k + 1) for k in range(n_clients)]
    fed = SyntheticFederation.build(config, class_sets, seed)
    sizes = (n_cal,) * n_clients
    rules = [("federated", QuantileRule())] + [(f"dp:{p:g}", QuantileRule(Rule.DP, privacy=p)) for p in privacies]
    per_rule = {name: [] for name, _ in rules}
    for t in range(trials):
        clients = fed.holdout(sizes, n_cal, t)
        for name, rule in rules:
            plan = FederationPlan(class_sets, sizes, alpha, rule=rule, seed=derive_seed(seed, 6, t))
            per_rule[name].append(run_trial(fed, plan, t, n_draws=n_draws, clients=clients).summary)
    rows = []
    for name, rule in rules:
        covs = np.array([s["coverage"] for s in per_rule[name]])
        rows.append({
            "rule": name,
            "privacy": rule.privacy,
            "coverage": float(covs.mean()),
            "coverage_sd": float(covs.std(ddof=1)) if covs.size > 1 else 0.0,
            "mean_size": float(np.mean([s["mean_size"] for s in per_rule[name]])),
            "trials": int(covs.size),
            "n": int(covs.size * n_draws),
        })
    return rows


def heterogeneity_sweep(levels=(2, 3, 4, 10), alpha=0.1, n_clients=5, n_cal=100, trials=20, n_draws=2000,
                        seed=0, config=None):
    """Coverage and mean set size as client class sets grow from disjoint to IID."""
    config = config or SyntheticConfig()
    rows = []
    for level in levels:
        class_sets = make_class_sets(config.n_classes, n_clients, level, seed)
        fed = SyntheticFederation.build(config, class_sets, seed)
        plan = FederationPlan(class_sets, (n_cal,) * n_clients, alpha, seed=seed)
        outcomes = [run_trial(fed, plan, t, n_draws=n_draws) for t in range(trials)]
        n = trials * n_draws
        rows.append({
            "classes_per_client": level,
            "iid": level == config.n_classes,
            "coverage": mean_over(outcomes, "coverage"),
            "mean_size": mean_over(outcomes, "mean_size"),
            "top1_accuracy": mean_over(outcomes, "top1_accuracy"),
            "train_accuracy": fed.train_accuracy,
            "se": binomial_se(1 - alpha, n),
            "n": n,
        })
    return rows


def make_class_sets(n_classes, n_clients, classes_per_client, seed):
    return make_partitions(n_classes, n_clients, classes_per_client, seed,
                           allow_uncovered=classes_per_client * n_clients < n_classes)
