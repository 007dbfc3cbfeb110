import math
import warnings

import numpy as np
import pytest

from fcp.errors import InvalidInputError, VacuousQuantileWarning
from fcp.federation import (
    FederationPlan,
    QuantileRule,
    calibrate,
    calibrate_scores,
    centralized_threshold,
    make_partitions,
    predict,
    sample_test_mixture,
)
from fcp.model import ClientData, Examples, LinearSoftmax, LookupModel, SyntheticTask, generate_clients
from fcp.quantile import MixtureWeights, Rule, federated_rank, iid_rank
from fcp.scores import ScoreFunctionSpec, label_scores, softmax
from fcp.sketch import SketchKind

MEANS = np.array([[-3.0, 0.0], [3.0, 0.0], [0.0, 3.0], [0.0, -3.0]])


def toy_model():
    w = np.hstack([MEANS, np.zeros((4, 1))])
    return LinearSoftmax(w)


def toy_clients(sizes=(40, 30), class_sets=((0, 1), (2, 3)), seed=0, n_test=50):
    return generate_clients(SyntheticTask(MEANS, noise_sigma=2.0), class_sets, sizes, n_test=n_test, seed=seed)


class TestQuantileRule:
    @pytest.mark.parametrize("text", ["federated", "iid", "uniform", "robust:0.2", "weighted:0.1", "dp:1", "single:1"])
    def test_round_trip(self, text):
        assert str(QuantileRule.parse(text)) == text

    @pytest.mark.parametrize("text", ["robust:1.5", "dp", "dp:-1", "single:-2", "iid:3", "median"])
    def test_rejects(self, text):
        with pytest.raises(InvalidInputError):
            QuantileRule.parse(text)


class TestPartitions:
    def test_disjoint_pairs(self):
        parts = make_partitions(10, 5, 2, seed=0)
        assert all(len(p) == 2 for p in parts)
        assert sorted(c for p in parts for c in p) == list(range(10))

    def test_one_class_each(self):
        parts = make_partitions(10, 10, 1, seed=1)
        assert sorted(c for p in parts for c in p) == list(range(10))

    def test_iid(self):
        assert all(set(p) == set(range(10)) for p in make_partitions(10, 4, 10, seed=0))

    def test_seeded(self):
        assert make_partitions(10, 5, 2, seed=3) == make_partitions(10, 5, 2, seed=3)

    def test_infeasible_without_flag(self):
        with pytest.raises(InvalidInputError):
            make_partitions(10, 2, 2, seed=0)
        assert len(make_partitions(10, 2, 2, seed=0, allow_uncovered=True)) == 2


class TestCalibrateScores:
    def test_federated_example(self):
        # Two clients with 7 and 5 scores at alpha 0.3: the 10th smallest pooled score.
        a, b = np.arange(1, 8) / 10, np.arange(8, 13) / 10
        res = calibrate_scores([a, b], 0.3)
        assert res.rank == 10 and res.threshold == pytest.approx(1.0)

    @pytest.mark.parametrize("kind", ["exact", "tdigest:100", "ddsketch:0.01"])
    def test_bytes_counted(self, kind):
        res = calibrate_scores([np.random.default_rng(0).random(100)] * 3, 0.1, sketch_kind=SketchKind.parse(kind))
        assert res.sketch_bytes > 0

    def test_vacuous(self):
        res = calibrate_scores([[0.1]] * 10, 0.05)
        assert res.vacuous and res.threshold == math.inf

    def test_distributed_equals_centralized(self):
        rng = np.random.default_rng(1)
        rules = ["federated", "iid", "robust:0.1", "uniform", "weighted:0.2", "dp:2", "single:0"]
        for i in range(100):
            k = int(rng.integers(1, 6))
            clients = [rng.random(int(rng.integers(1, 60))) for _ in range(k)]
            alpha = float(rng.uniform(0.05, 0.5))
            rule = QuantileRule.parse(rules[i % len(rules)])
            got = calibrate_scores(clients, alpha, rule, seed=i).threshold
            assert got == centralized_threshold(clients, alpha, rule, seed=i)

    def test_dp_deterministic(self):
        s = [np.random.default_rng(2).random(50)]
        rule = QuantileRule.parse("dp:1")
        assert calibrate_scores(s, 0.1, rule, seed=4) == calibrate_scores(s, 0.1, rule, seed=4)

    def test_robust_is_at_least_federated(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            clients = [rng.random(50) for _ in range(4)]
            fed = calibrate_scores(clients, 0.3).threshold
            rob = calibrate_scores(clients, 0.3, QuantileRule.parse("robust:0.2")).threshold
            assert rob >= fed

    def test_single_client_out_of_range(self):
        with pytest.raises(InvalidInputError):
            calibrate_scores([[0.1], [0.2]], 0.1, QuantileRule(Rule.SINGLE_CLIENT, client=2))

    def test_empty_client(self):
        with pytest.raises(InvalidInputError):
            calibrate_scores([[0.1], []], 0.1)


class TestCalibrate:
    def test_single_client_matches_split_conformal(self):
        (c,) = toy_clients(sizes=(80,), class_sets=((0, 1, 2, 3),))
        model = toy_model()
        plan = FederationPlan([c.classes], [80], 0.1)
        pred = calibrate(plan, [c], model)
        scores = label_scores(plan.score_spec, softmax(model.logits(c.calibration.features), pred.temperature),
                              c.calibration.labels)
        assert pred.threshold == np.sort(scores)[iid_rank(80, 0.1) - 1]

    def test_temperature_is_client_average(self):
        clients = toy_clients()
        pred = calibrate(FederationPlan([c.classes for c in clients], [40, 30], 0.1), clients, toy_model())
        assert pred.temperature == pytest.approx(np.mean(pred.client_temperatures))
        assert len(pred.client_temperatures) == 2

    def test_without_temperature_scaling(self):
        clients = toy_clients()
        plan = FederationPlan([c.classes for c in clients], [40, 30], 0.1, temperature_scaling=False)
        assert calibrate(plan, clients, toy_model()).temperature == 1.0

    def test_single_label_client_is_flagged(self):
        clients = toy_clients(class_sets=((0,), (1, 2)))
        pred = calibrate(FederationPlan([c.classes for c in clients], [40, 30], 0.1), clients, toy_model())
        assert pred.degenerate_clients == ("0",)
        assert pred.client_temperatures[0] == 1.0

    def test_vacuous_warns_and_gives_full_sets(self):
        clients = toy_clients(sizes=(3, 3), n_test=5)
        plan = FederationPlan([c.classes for c in clients], [3, 3], 0.1)
        with pytest.warns(VacuousQuantileWarning):
            pred = calibrate(plan, clients, toy_model())
        assert pred.vacuous
        assert predict(pred, toy_model(), [0.0, 0.0]).labels == {0, 1, 2, 3}

    def test_empty_client_rejected(self):
        clients = toy_clients()
        empty = ClientData("x", (0,), Examples.empty(2), clients[0].test)
        with pytest.raises(InvalidInputError):
            calibrate(FederationPlan([(0,), (1,)], [1, 1], 0.1), [clients[0], empty], toy_model())

    def test_predict_lac_example(self):
        model = LookupModel({"a": np.log([0.7, 0.2, 0.1])})
        clients = [ClientData("0", (0, 1, 2), Examples(np.array(["a"] * 2), [0, 1]), Examples.empty())]
        plan = FederationPlan([(0, 1, 2)], [2], 0.5, temperature_scaling=False)
        pred = calibrate(plan, clients, model)
        pred = type(pred)(**{**pred.__dict__, "threshold": 0.85})
        assert predict(pred, model, "a").labels == {0, 1}
        assert predict(pred, model, "a") == predict(pred, model, "a")

    def test_exact_and_tdigest_agree_on_small_data(self):
        # Below the T-Digest buffer size every value is its own centroid.
        clients = toy_clients()
        model = toy_model()
        plans = [FederationPlan([c.classes for c in clients], [40, 30], 0.2, sketch_kind=SketchKind.parse(k))
                 for k in ("exact", "tdigest:100")]
        a, b = (calibrate(p, clients, model) for p in plans)
        assert a.threshold == b.threshold


class TestMixture:
    def test_point_mass(self):
        clients = toy_clients()
        s = sample_test_mixture(clients, MixtureWeights((1.0, 0.0)), 500, seed=0)
        assert set(s.client_index) == {0}

    def test_proportional_frequency(self):
        clients = toy_clients(sizes=(7, 5))
        m = 100_000
        s = sample_test_mixture(clients, MixtureWeights.proportional([7, 5]), m, seed=1)
        p = 8 / 14
        freq = np.mean(s.client_index == 0)
        assert abs(freq - p) <= 3 * math.sqrt(p * (1 - p) / m)

    def test_seeded(self):
        clients = toy_clients()
        a = sample_test_mixture(clients, MixtureWeights.uniform(2), 100, seed=5)
        b = sample_test_mixture(clients, MixtureWeights.uniform(2), 100, seed=5)
        np.testing.assert_array_equal(a.ids, b.ids)

    def test_draws_come_from_the_client_pool(self):
        clients = toy_clients()
        s = sample_test_mixture(clients, MixtureWeights.uniform(2), 300, seed=2)
        for k, c in enumerate(clients):
            assert set(s.ids[s.client_index == k]) <= set(c.test.ids)
