import json

import numpy as np
import pytest

from fcp.errors import FormatError, InvalidInputError, ParseError, TrainingError
from fcp.model import (
    ClientData,
    Examples,
    LinearSoftmax,
    LookupModel,
    SyntheticTask,
    accuracy,
    generate_clients,
    load_score_file,
    train_fedavg_linear,
    write_score_file,
)

MEANS = np.array([[-3.0, 0.0], [3.0, 0.0], [0.0, 3.0]])


class TestGenerateClients:
    def test_zero_noise_hits_class_means(self):
        task = SyntheticTask(MEANS, noise_sigma=0.0)
        (c,) = generate_clients(task, [(0, 2)], [20], seed=1)
        np.testing.assert_array_equal(c.calibration.features, MEANS[c.calibration.labels])

    def test_single_class_client(self):
        (c,) = generate_clients(SyntheticTask(MEANS), [(1,)], [30], n_test=10, seed=0)
        assert set(c.calibration.labels) == {1} and set(c.test.labels) == {1}
        assert len(c.test) == 10

    def test_deterministic(self):
        task = SyntheticTask(MEANS)
        a = generate_clients(task, [(0, 1), (2,)], [5, 6], seed=3)
        b = generate_clients(task, [(0, 1), (2,)], [5, 6], seed=3)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.calibration.features, y.calibration.features)

    def test_clients_use_separate_streams(self):
        a, b = generate_clients(SyntheticTask(MEANS), [(0,), (0,)], [5, 5], seed=3)
        assert not np.array_equal(a.calibration.features, b.calibration.features)

    def test_class_out_of_range(self):
        with pytest.raises(InvalidInputError):
            generate_clients(SyntheticTask(MEANS), [(0, 3)], [5])

    def test_split_preserves_rows(self):
        (c,) = generate_clients(SyntheticTask(MEANS), [(0, 1, 2)], [10], n_test=11, seed=0)
        s = c.split(seed=4)
        assert len(s.calibration) == 10 and len(s.test) == 11
        assert sorted(np.r_[s.calibration.ids, s.test.ids]) == sorted(np.r_[c.calibration.ids, c.test.ids])


class TestTraining:
    def test_separable_task_trains(self):
        task = SyntheticTask(np.array([[-2.0, 0.0], [2.0, 0.0]]), noise_sigma=0.5)
        clients = generate_clients(task, [(0, 1)], [0], n_test=0, n_train=400, seed=0)
        model = train_fedavg_linear(clients, 2, rounds=200, local_steps=1, lr=0.5, seed=0)
        assert accuracy(model, clients[0].train) >= 0.95

    def test_zero_rounds_returns_initialisation(self):
        clients = generate_clients(SyntheticTask(MEANS), [(0, 1)], [0], n_test=0, n_train=10, seed=0)
        a = train_fedavg_linear(clients, 3, rounds=0, seed=5)
        b = train_fedavg_linear(clients, 3, rounds=0, seed=5)
        np.testing.assert_array_equal(a.weights, b.weights)
        assert np.abs(a.weights).max() < 0.1

    def test_loss_decreases(self):
        clients = generate_clients(SyntheticTask(MEANS), [(0, 1), (1, 2)], [0, 0], n_test=0, n_train=100, seed=0)
        history = []
        train_fedavg_linear(clients, 3, rounds=30, seed=0, history=history)
        assert len(history) == 31 and history[-1] < history[0]

    def test_divergence_reports_round(self):
        task = SyntheticTask(MEANS * 1e150)
        clients = generate_clients(task, [(0, 1)], [0], n_test=0, n_train=10, seed=0)
        with pytest.raises(TrainingError) as info, np.errstate(all="ignore"):
            train_fedavg_linear(clients, 3, rounds=5, lr=1e10, seed=0)
        assert info.value.round_index == 0

    def test_missing_training_data(self):
        clients = generate_clients(SyntheticTask(MEANS), [(0, 1)], [5], seed=0)
        with pytest.raises(InvalidInputError):
            train_fedavg_linear(clients, 3)


class TestModels:
    def test_linear_logits(self):
        m = LinearSoftmax([[1.0, 0.0, 0.5], [0.0, 1.0, -0.5]])
        np.testing.assert_allclose(m.logits([[2.0, 3.0]]), [[2.5, 2.5]])

    def test_lookup(self):
        m = LookupModel({"a": [1.0, 2.0], "b": [0.0, 0.0]})
        np.testing.assert_array_equal(m.logits(["b", "a"]), [[0, 0], [1, 2]])
        with pytest.raises(InvalidInputError):
            m.logits(["zzz"])

    def test_lookup_inconsistent_width(self):
        with pytest.raises(FormatError):
            LookupModel({"a": [1.0, 2.0], "b": [0.0, 0.0, 1.0]})


CSV_TEXT = """client_id,example_id,true_label,logit_0,logit_1,logit_2
c0,e1,0,2.0,0.1,-1.0
c0,e2,2,0.0,0.5,1.5
c1,e3,1,0.3,0.9,0.0
"""


class TestScoreFiles:
    def test_three_rows(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text(CSV_TEXT)
        data = load_score_file(p)
        assert set(data.model.table) == {"e1", "e2", "e3"}
        assert data.row_counts == {"c0": 2, "c1": 1}
        np.testing.assert_allclose(data.model.logits(["e2"]), [[0.0, 0.5, 1.5]])

    def test_label_equal_to_class_count(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text(CSV_TEXT + "c1,e4,3,0,0,0\n")
        with pytest.raises(ParseError) as info:
            load_score_file(p)
        assert info.value.line == 5

    def test_jsonl_bad_label_line(self, tmp_path):
        p = tmp_path / "s.jsonl"
        rows = [{"client_id": "a", "example_id": str(i), "true_label": 0, "logits": [0, 1]} for i in range(2)]
        rows.append({"client_id": "a", "example_id": "x", "true_label": 2, "logits": [0, 1]})
        p.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        with pytest.raises(ParseError) as info:
            load_score_file(p)
        assert info.value.line == 3

    def test_inconsistent_class_count(self, tmp_path):
        p = tmp_path / "s.jsonl"
        p.write_text(
            json.dumps({"client_id": "a", "example_id": "1", "true_label": 0, "logits": [0, 1]}) + "\n"
            + json.dumps({"client_id": "a", "example_id": "2", "true_label": 0, "logits": [0, 1, 2]}) + "\n"
        )
        with pytest.raises(FormatError):
            load_score_file(p)

    def test_bad_header(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("client,example,label,a,b\nc,e,0,1,2\n")
        with pytest.raises(ParseError) as info:
            load_score_file(p)
        assert info.value.line == 1

    def test_duplicate_ids(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text(CSV_TEXT + "c1,e3,1,0,0,0\n")
        with pytest.raises(ParseError):
            load_score_file(p)

    def test_malformed_json(self, tmp_path):
        p = tmp_path / "s.jsonl"
        p.write_text("{not json}\n")
        with pytest.raises(ParseError) as info:
            load_score_file(p)
        assert info.value.line == 1

    def test_csv_jsonl_round_trip(self, tmp_path):
        clients = generate_clients(SyntheticTask(MEANS), [(0, 1), (2,)], [7, 5], n_test=3, seed=0)
        model = LinearSoftmax(np.random.default_rng(0).normal(size=(3, 3)))
        a = load_score_file(write_score_file(tmp_path / "s.csv", clients, model))
        b = load_score_file(write_score_file(tmp_path / "s.jsonl", clients, model))
        assert a.model.table == b.model.table
        assert a.row_counts == b.row_counts == {"0": 10, "1": 8}
        for ca, cb in zip(a.clients, b.clients):
            np.testing.assert_array_equal(ca.calibration.labels, cb.calibration.labels)
