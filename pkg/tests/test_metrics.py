import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from galtraj.exceptions import EvaluationError
from galtraj.metrics import (check_error_table, false_prediction_ratio, make_error_table, min_ade, min_fde,
                             read_error_table, summarize, top_k_percent, value_at_risk, write_error_table)

from oracles import (oracle_fpr, oracle_min_ade, oracle_min_fde, oracle_top_k, oracle_var, random_table_pair,
                     rows)


def table(values, ids=None):
    ids = ids if ids is not None else range(len(values))
    return make_error_table([(i, 0, v, v) for i, v in zip(ids, values)])


class TestDisplacement:
    def test_identity(self, rng):
        truth = rng.normal(size=(30, 2))
        modes = rng.normal(size=(6, 30, 2))
        modes[3] = truth
        assert min_ade(modes, truth) == 0.0
        assert min_fde(modes, truth) == 0.0

    def test_constant_offset(self, rng):
        truth = rng.normal(size=(30, 2))
        modes = np.repeat((truth + [0.0, 2.0])[None], 6, axis=0)
        assert min_ade(modes, truth) == pytest.approx(2.0, abs=1e-12)
        assert min_fde(modes, truth) == pytest.approx(2.0, abs=1e-12)

    def test_three_four_five(self, rng):
        truth = rng.normal(size=(30, 2))
        modes = np.repeat((truth + [3.0, 4.0])[None], 6, axis=0)
        assert min_ade(modes, truth) == pytest.approx(5.0, abs=1e-12)

    def test_no_valid_steps(self, rng):
        truth = rng.normal(size=(30, 2))
        assert math.isnan(min_ade(rng.normal(size=(6, 30, 2)), truth, np.zeros(30, bool)))
        assert math.isnan(min_fde(rng.normal(size=(6, 30, 2)), truth, np.zeros(30, bool)))

    def test_shape_mismatch(self, rng):
        with pytest.raises(EvaluationError):
            min_ade(rng.normal(size=(6, 29, 2)), rng.normal(size=(30, 2)))

    def test_matches_oracle(self, rng):
        for _ in range(200):
            truth = rng.normal(size=(30, 2)) * 5
            modes = truth + rng.normal(size=(6, 30, 2))
            mask = rng.random(30) < 0.8
            assert min_ade(modes, truth, mask) == oracle_min_ade(modes, truth, mask) or not mask.any()
            assert min_fde(modes, truth, mask) == oracle_min_fde(modes, truth, mask) or not mask.any()


class TestTopK:
    def test_self_reference(self):
        t = table(np.arange(1, 101, dtype=float))
        assert top_k_percent(t, t, 1) == 100.0

    def test_values_from_current(self):
        ref = table([5.0] + [1.0] * 99)
        cur = table([0.3] + [9.0] * 99)
        assert top_k_percent(ref, cur, 1) == 0.3

    def test_ties_by_key(self):
        ref = table([2.0, 2.0, 1.0], ids=[7, 3, 5])
        cur = table([10.0, 20.0, 30.0], ids=[7, 3, 5])
        assert top_k_percent(ref, cur, 30) == 20.0  # ceil(0.9) = 1 key: the smaller scenario id

    def test_key_mismatch(self):
        with pytest.raises(EvaluationError, match="differing keys"):
            top_k_percent(table([1.0, 2.0]), table([1.0, 2.0], ids=[0, 5]), 50)

    @pytest.mark.parametrize("k", [0, -1, 101])
    def test_k_range(self, k):
        t = table([1.0, 2.0])
        with pytest.raises(EvaluationError):
            top_k_percent(t, t, k)

    def test_matches_oracle(self, rng):
        for _ in range(100):
            ref, cur = random_table_pair(rng, int(rng.integers(1, 500)))
            for k in (1, 3, 5, 50):
                assert top_k_percent(ref, cur, k) == oracle_top_k(rows(ref), rows(cur), k)


class TestVaR:
    def test_rank_arithmetic(self):
        assert value_at_risk(table(np.arange(1, 1001, dtype=float)), 999) == 999.0

    def test_constant(self):
        for alpha in (1, 500, 999):
            assert value_at_risk(table([0.7] * 13), alpha) == 0.7

    def test_empty(self):
        with pytest.raises(EvaluationError):
            value_at_risk(table([]), 999)

    @pytest.mark.parametrize("alpha", [0, 1000])
    def test_alpha_range(self, alpha):
        with pytest.raises(EvaluationError):
            value_at_risk(table([1.0]), alpha)

    def test_matches_oracle(self, rng):
        for _ in range(200):
            vals = rng.exponential(size=int(rng.integers(1, 3000)))
            alpha = int(rng.integers(1, 1000))
            assert value_at_risk(vals, alpha) == oracle_var(vals.tolist(), alpha)


class TestFPR:
    def test_count(self):
        assert false_prediction_ratio(table([1.0, 2.0, 6.0, 7.0]), 5.0) == 50.0

    def test_above_max(self):
        assert false_prediction_ratio(table([1.0, 2.0]), 3.0) == 0.0

    def test_empty(self):
        with pytest.raises(EvaluationError):
            false_prediction_ratio(table([]), 1.0)

    def test_large_random(self, rng):
        vals = rng.exponential(2.0, size=100_000)
        assert false_prediction_ratio(vals, 5.0) == oracle_fpr(vals.tolist(), 5.0)


class TestProperties:
    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=200))
    def test_var_monotone_in_alpha(self, vals):
        out = [value_at_risk(vals, a) for a in (100, 500, 900, 999)]
        assert out == sorted(out)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=200))
    def test_fpr_nonincreasing_in_threshold(self, vals):
        out = [false_prediction_ratio(vals, th) for th in (0.0, 1.0, 5.0, 50.0)]
        assert out == sorted(out, reverse=True)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0.01, 100, allow_nan=False), min_size=1, max_size=200), st.sampled_from([0.5, 2.0, 4.0]))
    def test_scale_equivariance(self, vals, c):
        vals = np.asarray(vals)
        scaled = vals * c
        assert value_at_risk(scaled, 990) == value_at_risk(vals, 990) * c
        assert false_prediction_ratio(scaled, 3.0 * c) == false_prediction_ratio(vals, 3.0)
        ref, cur = table(vals), table(scaled)
        assert top_k_percent(ref, cur, 5) == pytest.approx(top_k_percent(ref, ref, 5) * c, rel=1e-12)

    def test_top_k_nonincreasing_for_monotone_tables(self, rng):
        vals = rng.exponential(size=500)
        ref, cur = table(vals), table(np.sqrt(vals) * 3)
        out = [top_k_percent(ref, cur, k) for k in (1, 3, 5, 20, 100)]
        assert out == sorted(out, reverse=True)


class TestTables:
    def test_round_trip(self, tmp_path, rng):
        ref, _ = random_table_pair(rng, 50)
        back = read_error_table(write_error_table(ref, tmp_path / "t.csv"))
        pd.testing.assert_frame_equal(back[ref.columns.tolist()], ref)

    def test_duplicates_rejected(self):
        t = table([1.0, 2.0], ids=[1, 1])
        with pytest.raises(EvaluationError):
            check_error_table(t)

    def test_non_finite_rejected(self):
        with pytest.raises(EvaluationError):
            check_error_table(table([1.0, math.inf]))

    def test_summarize_columns(self):
        t = table(np.arange(1.0, 11.0))
        row = summarize(t, t)
        assert list(row) == ["top1", "top3", "top5", "var999", "fpr1", "fpr2", "minade6", "minfde6"]
        assert row["top1"] == 10.0
