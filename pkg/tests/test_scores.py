import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fcp.errors import DegenerateCalibrationWarning, InvalidInputError
from fcp.scores import (
    ScoreFunctionSpec,
    ScoreKind,
    all_label_scores,
    average_temperatures,
    build_prediction_set,
    fit_temperature,
    label_scores,
    nll,
    prediction_set_masks,
    score,
    softmax,
)

LAC = ScoreFunctionSpec(ScoreKind.LAC)
APS = ScoreFunctionSpec(ScoreKind.APS)


def prob_vectors(j_min=2, j_max=8):
    def normalise(x):
        x = np.asarray(x) + 1e-3
        return x / x.sum()

    return st.integers(j_min, j_max).flatmap(
        lambda j: arrays(float, j, elements=st.floats(0, 1)).map(normalise)
    )


class TestSoftmax:
    def test_symmetric_logits(self):
        np.testing.assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5])

    def test_log_two(self):
        np.testing.assert_allclose(softmax([math.log(2), 0.0]), [2 / 3, 1 / 3])

    def test_large_logits_do_not_overflow(self):
        with np.errstate(over="raise", invalid="raise"):
            p = softmax([1000.0, 0.0])
        assert p[0] == pytest.approx(1.0)
        assert p[1] == pytest.approx(0.0, abs=1e-300)

    def test_batch_rows_sum_to_one(self):
        p = softmax(np.random.default_rng(0).normal(size=(5, 4)), temperature=0.5)
        np.testing.assert_allclose(p.sum(axis=1), 1.0)

    @pytest.mark.parametrize("t", [0.0, -1.0, math.inf, math.nan])
    def test_bad_temperature(self, t):
        with pytest.raises(InvalidInputError):
            softmax([1.0, 2.0], temperature=t)

    def test_non_finite_logit(self):
        with pytest.raises(InvalidInputError):
            softmax([1.0, math.nan])


def _grid_argmin(z, y):
    grid = np.exp(np.linspace(math.log(0.01), math.log(100), 4001))
    return grid[np.argmin([nll(z, y, t) for t in grid])]


class TestTemperature:
    def _matched(self):
        # Logits equal to log class frequencies; labels drawn to match them exactly.
        freqs = np.array([0.6, 0.3, 0.1])
        z = np.tile(np.log(freqs), (100, 1))
        y = np.repeat([0, 1, 2], [60, 30, 10])
        return z, y

    def test_matched_frequencies_give_unit_temperature(self):
        z, y = self._matched()
        t = fit_temperature(z, y)
        assert t == pytest.approx(1.0, abs=1e-3)
        assert t == pytest.approx(_grid_argmin(z, y), rel=5e-3)

    def test_scaled_logits_give_double_temperature(self):
        z, y = self._matched()
        t = fit_temperature(2 * z, y)
        assert t == pytest.approx(2.0, rel=1e-3)
        assert t == pytest.approx(_grid_argmin(2 * z, y), rel=5e-3)

    def test_matches_grid_oracle_on_random_data(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=(300, 4)) * 3
        y = np.array([rng.choice(4, p=softmax(row / 1.7)) for row in z])
        assert fit_temperature(z, y) == pytest.approx(_grid_argmin(z, y), rel=5e-3)

    def test_single_label_falls_back_with_warning(self):
        z = np.random.default_rng(0).normal(size=(10, 3))
        with pytest.warns(DegenerateCalibrationWarning):
            assert fit_temperature(z, np.zeros(10, dtype=int)) == 1.0

    def test_label_out_of_range(self):
        with pytest.raises(InvalidInputError):
            fit_temperature(np.zeros((3, 2)), [0, 1, 2])

    @pytest.mark.parametrize("temps, expected", [((1.0,), 1.0), ((1.0, 3.0), 2.0), ((2.0, 2.0, 2.0), 2.0)])
    def test_average(self, temps, expected):
        assert average_temperatures(temps) == expected

    def test_average_empty(self):
        with pytest.raises(InvalidInputError):
            average_temperatures([])


class TestScores:
    def test_lac(self):
        assert score(LAC, [0.7, 0.2, 0.1], 0) == pytest.approx(0.3)

    def test_aps(self):
        assert score(APS, [0.5, 0.3, 0.2], 1) == pytest.approx(0.8)

    def test_aps_unsorted_input(self):
        assert score(APS, [0.2, 0.5, 0.3], 2) == pytest.approx(0.8)

    def test_raps(self):
        spec = ScoreFunctionSpec(ScoreKind.RAPS, raps_penalty=0.1, raps_rank_threshold=1)
        assert score(spec, [0.5, 0.3, 0.2], 2) == pytest.approx(1.2)

    def test_aps_ties_break_by_class_index(self):
        assert score(APS, [0.4, 0.4, 0.2], 0) == pytest.approx(0.4)
        assert score(APS, [0.4, 0.4, 0.2], 1) == pytest.approx(0.8)

    @pytest.mark.parametrize("label", [-1, 3, 1.5])
    def test_label_out_of_range(self, label):
        with pytest.raises(InvalidInputError):
            score(LAC, [0.7, 0.2, 0.1], label)

    def test_rejects_unnormalised(self):
        with pytest.raises(InvalidInputError):
            score(LAC, [0.7, 0.2, 0.2], 0)

    @pytest.mark.parametrize("text", ["lac", "aps", "raps", "raps:0.01:2"])
    def test_spec_round_trip(self, text):
        spec = ScoreFunctionSpec.parse(text)
        assert ScoreFunctionSpec.parse(str(spec)) == spec

    def test_spec_rejects_unknown(self):
        with pytest.raises(InvalidInputError):
            ScoreFunctionSpec.parse("softmax")

    @given(prob_vectors(), st.sampled_from(["lac", "aps", "raps:0.05:1"]))
    def test_batch_matches_scalar(self, p, kind):
        spec = ScoreFunctionSpec.parse(kind)
        batch = label_scores(spec, np.tile(p, (len(p), 1)), np.arange(len(p)))
        np.testing.assert_allclose(batch, [score(spec, p, y) for y in range(len(p))])

    @given(prob_vectors())
    def test_aps_brute_force(self, p):
        order = sorted(range(len(p)), key=lambda c: (-p[c], c))
        for y in range(len(p)):
            expected = sum(p[c] for c in order[: order.index(y) + 1])
            assert score(APS, p, y) == pytest.approx(expected, abs=1e-12)


class TestPredictionSets:
    def test_infinite_threshold_gives_full_set(self):
        s = build_prediction_set(LAC, [0.7, 0.2, 0.1], math.inf)
        assert s.labels == {0, 1, 2} and not s.forced_top1

    def test_low_threshold_forces_argmax(self):
        s = build_prediction_set(LAC, [0.2, 0.7, 0.1], -1.0)
        assert s.labels == {1} and s.forced_top1

    def test_lac_example(self):
        assert build_prediction_set(LAC, [0.7, 0.2, 0.1], 0.85).labels == {0, 1}

    def test_nan_threshold(self):
        with pytest.raises(InvalidInputError):
            build_prediction_set(LAC, [0.5, 0.5], math.nan)

    @given(prob_vectors(), st.floats(-0.5, 1.5), st.sampled_from(["lac", "aps", "raps"]))
    def test_membership_is_per_class_thresholding(self, p, t, kind):
        spec = ScoreFunctionSpec.parse(kind)
        s = build_prediction_set(spec, p, t)
        expected = {y for y in range(len(p)) if score(spec, p, y) <= t}
        if not expected:
            expected = {int(np.argmax(p))}
        assert s.labels == expected
        assert s.forced_top1 == (not any(score(spec, p, y) <= t for y in range(len(p))))

    @given(prob_vectors(), st.floats(-0.5, 1.5))
    def test_sets_are_never_empty_and_contain_argmax_when_forced(self, p, t):
        mask, forced = prediction_set_masks(APS, p, t)
        assert mask.sum() >= 1
        if forced[0]:
            assert mask[0, int(np.argmax(p))]

    def test_all_label_scores_shape(self):
        p = softmax(np.random.default_rng(1).normal(size=(6, 5)))
        assert all_label_scores(APS, p).shape == (6, 5)

    def test_aps_sets_nested_in_threshold(self):
        p = softmax(np.random.default_rng(2).normal(size=(50, 6)))
        small, _ = prediction_set_masks(APS, p, 0.5)
        big, _ = prediction_set_masks(APS, p, 0.8)
        assert np.all(big | ~small)
