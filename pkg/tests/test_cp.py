import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cplab import cp
from cplab.model import IclTransformer, ModelConfig


class TestNcsLogloss:
    def test_certain_prediction(self):
        assert cp.ncs_logloss([0.0, 1.0], 1) == 0.0

    def test_closed_form(self):
        assert abs(cp.ncs_logloss([math.exp(-1.0), 0.5], 0) - 1.0) < 1e-12

    def test_floor(self):
        assert abs(cp.ncs_logloss([0.0, 1.0], 0) - (-math.log(1e-12))) < 1e-9

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            cp.ncs_logloss([0.5, 0.5], 2)


class TestConformalQuantile:
    def test_singleton(self):
        assert cp.conformal_quantile([5.0], 0.1) == 5.0

    def test_enumeration(self):
        assert cp.conformal_quantile(range(1, 11), 0.1) == 9

    def test_with_infinity(self):
        assert cp.conformal_quantile([0.2, 0.4, math.inf], 0.1) == math.inf

    def test_duplicates_count_separately(self):
        assert cp.conformal_quantile([1.0, 1.0, 9.0], 0.5) == 1.0

    @pytest.mark.parametrize("alpha", [0.0, 1.0, -0.5, 2.0])
    def test_alpha_range(self, alpha):
        with pytest.raises(ValueError):
            cp.conformal_quantile([1.0], alpha)

    def test_empty(self):
        with pytest.raises(ValueError):
            cp.conformal_quantile([], 0.1)

    @given(
        st.lists(st.floats(-100, 100), min_size=1, max_size=30),
        st.floats(0.01, 0.99),
    )
    @settings(max_examples=100, deadline=None)
    def test_matches_order_statistic(self, scores, alpha):
        got = cp.conformal_quantile(scores, alpha)
        assert got == sorted(scores)[math.ceil((1 - alpha) * len(scores)) - 1]


class TestScp:
    def test_calibrate_m9(self):
        # m=9 scores plus the infinite point: index ceil(0.9*10)=9 -> 9th smallest
        assert cp.scp_calibrate(range(1, 10), 0.1) == 9

    def test_all_equal(self):
        # index ceil(0.8*9)=8 <= m: the +inf point is not reached
        assert cp.scp_calibrate([3.0] * 8, 0.2) == 3.0

    def test_m1_gives_infinity(self):
        assert cp.scp_calibrate([0.7], 0.1) == math.inf

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            cp.scp_calibrate([], 0.1)

    def test_predict_full_and_empty(self):
        assert cp.scp_predict(math.inf, [1.0, 2.0, 3.0]).members == {0, 1, 2}
        assert cp.scp_predict(0.05, [1.0, 2.0]).members == frozenset()

    def test_predict_threshold(self):
        pset = cp.scp_predict(0.9, [0.1, 0.5, 0.9, 1.3])
        assert pset.members == {0, 1, 2}
        assert (pset.thresholds == 0.9).all()


def brute_force_fcp(scores, alpha):
    """Direct evaluation of the full-CP definition, by enumeration."""
    members = set()
    k, m = scores.shape
    for y in range(k):
        row = sorted(scores[y])
        q = row[math.ceil((1 - alpha) * m) - 1]
        if scores[y, -1] <= q:
            members.add(y)
    return members


class TestFcpPredict:
    def test_forced_inclusion(self):
        rng = np.random.default_rng(0)
        scores = rng.uniform(size=(4, 5))
        # alpha < 1/(n+1): quantile is the row max, which bounds its own test score
        assert cp.fcp_predict(scores, 0.05).members == {0, 1, 2, 3}

    def test_constant_row_included(self):
        scores = np.array([[2.0, 2.0, 2.0, 2.0], [0.0, 0.0, 0.0, 9.0]])
        assert 0 in cp.fcp_predict(scores, 0.3).members

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            scores = rng.uniform(size=(2, 4))
            alpha = float(rng.uniform(0.05, 0.5))
            assert cp.fcp_predict(scores, alpha).members == brute_force_fcp(scores, alpha)

    def test_monotone_in_alpha(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            scores = rng.uniform(size=(4, 8))
            small = cp.fcp_predict(scores, 0.05).members
            large = cp.fcp_predict(scores, 0.4).members
            assert large <= small

    def test_dimension_check(self):
        with pytest.raises(ValueError):
            cp.fcp_predict(np.zeros((4,)), 0.1)


@pytest.fixture(scope="module")
def model():
    cfg = ModelConfig(num_layers=2, model_dim=8, num_heads=2, ffn_dim=16)
    return IclTransformer(cfg).seed_init(11)


class TestFcpScoresFromIcl:

    def test_shape(self, model):
        rng = np.random.default_rng(3)
        sm = cp.fcp_scores_from_icl(model, rng.normal(size=(5, 2)), rng.integers(0, 4, 5),
                                    rng.normal(size=2))
        assert sm.shape == (4, 6)
        assert np.isfinite(sm).all()

    def test_permutation_invariant_rows(self, model):
        rng = np.random.default_rng(4)
        cx, cy = rng.normal(size=(6, 2)), rng.integers(0, 4, 6)
        xt = rng.normal(size=2)
        a = cp.fcp_scores_from_icl(model, cx, cy, xt)
        perm = rng.permutation(6)
        b = cp.fcp_scores_from_icl(model, cx[perm], cy[perm], xt)
        # context rows permute with the data; the test column is unchanged
        assert np.abs(a[:, :-1][:, perm] - b[:, :-1]).max() < 1e-10
        assert np.abs(a[:, -1] - b[:, -1]).max() < 1e-10

    def test_counter_arithmetic(self):
        cfg = ModelConfig(num_layers=1, model_dim=8, num_heads=2, ffn_dim=16)
        model = IclTransformer(cfg).seed_init(0)
        rng = np.random.default_rng(5)
        counter = cp.EvalCounter()
        cp.fcp_scores_from_icl(model, rng.normal(size=(19, 2)), rng.integers(0, 4, 19),
                               rng.normal(size=2), counter=counter)
        assert counter.prediction_evals == 4 * 20  # K * (n+1)


class TestRetrainOracle:
    def test_single_class_context(self):
        xs = np.zeros((6, 2))
        ys = np.full(6, 2)
        _, scores = cp.fcp_retrain_oracle(
            lambda: cp.FrequencyPredictor(4), xs, ys, np.zeros(2), 0.1, 4
        )
        # the frequency model assigns class 2 the highest probability, so its
        # context scores are the lowest across candidates
        assert scores[2, :-1].max() < scores[0, :-1].min()

    def test_self_consistency_with_fcp_predict(self):
        rng = np.random.default_rng(6)
        for _ in range(300):
            k = int(rng.integers(2, 5))
            n = int(rng.integers(2, 9))
            ys = rng.integers(0, k, n)
            xs = rng.normal(size=(n, 2))
            alpha = float(rng.uniform(0.05, 0.4))
            pset, scores = cp.fcp_retrain_oracle(
                lambda: cp.FrequencyPredictor(k), xs, ys, rng.normal(size=2), alpha, k
            )
            assert pset.members == cp.fcp_predict(scores, alpha).members

    def test_monte_carlo_coverage(self):
        rng = np.random.default_rng(7)
        alpha, k, n = 0.2, 4, 7
        covered = 0
        draws = 500
        for _ in range(draws):
            ys = rng.integers(0, k, n)
            true = int(rng.integers(0, k))
            pset, _ = cp.fcp_retrain_oracle(
                lambda: cp.FrequencyPredictor(k), np.zeros((n, 2)), ys,
                np.zeros(2), alpha, k,
            )
            covered += true in pset
        assert covered / draws >= 1 - alpha - 3 * math.sqrt(alpha * (1 - alpha) / draws)


def test_pipeline_permutation_invariance():
    # shuffling the dataset never changes FCP membership
    cfg = ModelConfig(num_layers=1, model_dim=8, num_heads=2, ffn_dim=16)
    model = IclTransformer(cfg).seed_init(1)
    rng = np.random.default_rng(8)
    for _ in range(20):
        cx, cy = rng.normal(size=(6, 2)), rng.integers(0, 4, 6)
        xt = rng.normal(size=2)
        a = cp.fcp_predict(cp.fcp_scores_from_icl(model, cx, cy, xt), 0.2)
        perm = rng.permutation(6)
        b = cp.fcp_predict(cp.fcp_scores_from_icl(model, cx[perm], cy[perm], xt), 0.2)
        assert a.members == b.members
