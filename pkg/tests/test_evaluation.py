import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from models.population import MembershipPrior
from services.evaluation import (
    MATCH_RTOL,
    aggregate_seeds,
    config_hash,
    heterogeneous_kappa,
    mann_whitney_auc,
    matched_utility_dp,
    roc_auc,
)
from services.mechanisms import expected_utility_loss, laplace_mechanism, zero_noise_mechanism
from utils.exceptions import EvaluationError


class TestRoc:
    def test_worked_example(self):
        curve = roc_auc([0.9, 0.8, 0.4, 0.3], [1, 0, 1, 0])
        assert curve.auc == pytest.approx(0.75)
        assert (curve.n_pos, curve.n_neg) == (2, 2)

    def test_perfect_separation(self):
        assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]).auc == pytest.approx(1.0)

    def test_constant_confidences(self):
        assert roc_auc(np.full(6, 0.3), [1, 0, 1, 0, 0, 1]).auc == pytest.approx(0.5)

    def test_infinite_confidences(self):
        assert roc_auc([np.inf, 1.0, -np.inf], [1, 0, 0]).auc == pytest.approx(1.0)

    @pytest.mark.parametrize("labels", [[1, 1, 1], [0, 0, 0]])
    def test_single_class_rejected(self, labels):
        with pytest.raises(EvaluationError):
            roc_auc([0.1, 0.2, 0.3], labels)

    def test_shape_mismatch(self):
        with pytest.raises(EvaluationError):
            roc_auc([0.1, 0.2], [1, 0, 1])

    def test_points_are_monotone(self):
        rng = np.random.default_rng(0)
        curve = roc_auc(rng.random(200), rng.random(200) < 0.4)
        fpr, tpr = np.array(curve.points).T
        assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)

    def test_csv(self, tmp_path):
        path = roc_auc([0.9, 0.8, 0.4, 0.3], [1, 0, 1, 0]).write_csv(tmp_path / "roc.csv")
        assert path.read_text().splitlines()[0] == "fpr,tpr"

    @settings(max_examples=200, deadline=None)
    @given(
        st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=2, max_size=60, unique=True),
        st.data(),
    )
    def test_matches_mann_whitney_without_ties(self, scores, data):
        labels = data.draw(st.lists(st.booleans(), min_size=len(scores), max_size=len(scores)))
        assume(any(labels) and not all(labels))
        assert roc_auc(scores, labels).auc == pytest.approx(mann_whitney_auc(scores, labels), abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 4), st.booleans()), min_size=2, max_size=40))
    def test_ties_count_one_half(self, pairs):
        scores = [float(s) for s, _ in pairs]
        labels = [y for _, y in pairs]
        assume(any(labels) and not all(labels))
        assert roc_auc(scores, labels).auc == pytest.approx(mann_whitney_auc(scores, labels), abs=1e-12)


class TestSeeds:
    def test_hand_computed_std(self):
        result = aggregate_seeds([0.5, 0.6, 0.7])
        assert result.mean == pytest.approx(0.6)
        assert result.std == pytest.approx(0.1)
        assert result.per_seed == [0.5, 0.6, 0.7]

    def test_single_seed_has_no_std(self):
        assert np.isnan(aggregate_seeds([0.42]).std)

    def test_empty(self):
        with pytest.raises(EvaluationError):
            aggregate_seeds([])


def test_config_hash_ignores_key_order():
    a = {"name": "x", "seeds": [0, 1], "population": {"num_snvs": 10, "num_individuals": 5}}
    b = {"population": {"num_individuals": 5, "num_snvs": 10}, "seeds": [0, 1], "name": "x"}
    assert config_hash(a) == config_hash(b)
    assert len(config_hash(a)) == 64
    assert config_hash(a) != config_hash({**a, "seeds": [0, 2]})


class TestHeterogeneousKappa:
    def test_ten_percent_high(self):
        kappa = heterogeneous_kappa(5000, 0.1, 50.0, rng_seed=0)
        assert np.sum(kappa == 50.0) == 500
        assert np.sum(kappa == 0.0) == 4500

    def test_seeded(self):
        np.testing.assert_array_equal(heterogeneous_kappa(100, rng_seed=3), heterogeneous_kappa(100, rng_seed=3))

    def test_invalid_fraction(self):
        with pytest.raises(EvaluationError):
            heterogeneous_kappa(10, 1.5)


class TestMatchedDp:
    def test_zero_noise_is_unmatched(self, small_population, half_prior):
        match, mechanism = matched_utility_dp(
            zero_noise_mechanism(), small_population, half_prior(12), 1.0, 500, rng_seed=0
        )
        assert mechanism is None
        assert not match.matched
        assert match.epsilon == np.inf

    def test_unit_kappa_closed_form(self, small_population, half_prior):
        # target E Σ|δ_j| = m·s for Laplace scale s, so ε = sens / s
        target = laplace_mechanism(4.0, 1.0)
        match, mechanism = matched_utility_dp(
            target, small_population, half_prior(12), 1.0, 20000, rng_seed=1, sensitivity=1.0
        )
        assert match.matched
        assert match.epsilon == pytest.approx(1.0 / target.scale, rel=0.02)
        assert mechanism.scale == pytest.approx(target.scale, rel=0.02)

    def test_fixed_point(self, small_population, half_prior):
        sens = 12.5
        target = laplace_mechanism(600.0, sens)
        match, _ = matched_utility_dp(target, small_population, half_prior(12), 1.0, 20000, rng_seed=2, sensitivity=sens)
        assert match.epsilon == pytest.approx(600.0, rel=0.02)

    def test_match_reproduces_target_loss(self, small_population, half_prior):
        prior = half_prior(12)
        kappa = heterogeneous_kappa(40, 0.1, 50.0, rng_seed=4)
        match, mechanism = matched_utility_dp(
            laplace_mechanism(2.0, 1.0), small_population, prior, kappa, 20000, rng_seed=5, sensitivity=1.0
        )
        check = expected_utility_loss(mechanism, small_population, prior, kappa, 20000, rng_seed=6)
        slack = MATCH_RTOL * match.target_loss + 3 * np.hypot(check.se, match.target_se)
        assert abs(check.value - match.target_loss) <= slack
