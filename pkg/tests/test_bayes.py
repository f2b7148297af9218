import numpy as np
import pytest
from scipy.stats import norm

from models.mechanism import MeanMap
from models.population import MembershipPrior, MembershipVector, Population
from services.bayes import (
    BayesAttackerConfig,
    BayesThresholdAttacker,
    ConstantAttacker,
    PosteriorModel,
    aligned_prior_check,
    compare_attackers,
    exact_mirror_loss,
    mirror_dominance_report,
    mirror_strategy,
    mirror_strategy_loss,
    posterior,
    posterior_marginals_batch,
    privacy_loss,
    threshold_best_response,
    verify_theorem1_ordering,
)
from services.mechanisms import (
    gaussian_mechanism,
    gaussian_mechanism_theorem2,
    laplace_mechanism,
    zero_noise_mechanism,
)
from services.population import AafDistribution, generate_population
from utils.exceptions import MechanismError, PosteriorError


@pytest.fixture
def separable_population():
    """Every non-empty beacon of K = 4 has its own summary statistics."""
    return generate_population(4, 60, AafDistribution(kind="uniform", low=0.2, high=0.8), rng_seed=21)


class TestPosterior:
    def test_weights_are_normalized(self, tiny_population):
        table = posterior(gaussian_mechanism(0.05), tiny_population, MembershipPrior.uniform(4), np.full(3, 0.4))
        assert table.weights.sum() == pytest.approx(1.0, abs=1e-12)
        assert table.support.shape == (15, 4)

    def test_blind_mechanism_returns_prior(self, tiny_population):
        sigma = MembershipPrior.bernoulli(4, 0.3)
        mechanism = gaussian_mechanism(0.05, MeanMap.blind(3))
        table = posterior(mechanism, tiny_population, sigma, np.full(3, 0.2))
        prior = np.exp(sigma.log_prob(table.support))
        np.testing.assert_allclose(table.weights, prior / prior.sum(), atol=1e-9)

    def test_two_point_bayes(self):
        population = Population(np.array([[1], [0]]), np.array([0.5]))
        sigma = MembershipPrior.table([[0, 1], [1, 1]], [0.3, 0.7])
        y = 0.4
        table = posterior(gaussian_mechanism(0.25), population, sigma, [y])
        f0 = 0.3 * norm.pdf(y, 0.0, 0.5)
        f1 = 0.7 * norm.pdf(y, 0.5, 0.5)
        assert table.marginals[0] == pytest.approx(f1 / (f0 + f1), rel=1e-9)

    def test_point_mass_prior(self, tiny_population):
        b = MembershipVector.from_members(4, [1, 2])
        table = posterior(gaussian_mechanism(0.05), tiny_population, MembershipPrior.point_mass(b), np.zeros(3))
        np.testing.assert_array_equal(table.marginals, b.bits.astype(float))

    def test_clipped_mechanism_refused(self, tiny_population):
        with pytest.raises(MechanismError):
            PosteriorModel(laplace_mechanism(1.0, 1.0, clip=True), tiny_population, MembershipPrior.uniform(4))

    def test_underflow_is_reported(self):
        population = Population(np.array([[1], [0]]), np.array([0.5]))
        sigma = MembershipPrior.table([[1, 1]], [1.0])
        model = PosteriorModel(zero_noise_mechanism(), population, sigma)
        with pytest.raises(PosteriorError):
            model.log_posterior(np.array([[10.0]]))

    def test_batch_marginals_match_single_releases(self, tiny_population):
        sigma = MembershipPrior.bernoulli(4, 0.4)
        mechanism = gaussian_mechanism(0.05)
        releases = np.random.default_rng(5).random((3, 3))
        batch = posterior_marginals_batch(mechanism, tiny_population, sigma, releases)
        for row, release in zip(batch, releases):
            np.testing.assert_allclose(row, posterior(mechanism, tiny_population, sigma, release).marginals, atol=1e-12)

    def test_importance_sampling_approximates_enumeration(self, tiny_population):
        sigma = MembershipPrior.uniform(4)
        mechanism = gaussian_mechanism(0.1)
        release = np.full(3, 0.5)
        exact = posterior(mechanism, tiny_population, sigma, release).marginals
        approx = posterior(mechanism, tiny_population, sigma, release, "importance", 20000, rng_seed=0).marginals
        np.testing.assert_allclose(approx, exact, atol=0.03)


class TestBestResponse:
    def test_threshold_example(self):
        decision = threshold_best_response(np.array([0.8, 0.3]), 0.5)
        assert decision.claims.tolist() == [True, False]

    def test_tie_is_no_claim(self):
        assert not threshold_best_response(np.array([0.5]), 0.5).claims[0]

    def test_gamma_limits(self):
        mu = np.array([0.2, 0.7, 0.99])
        assert not threshold_best_response(mu, 0.999).claims.any()
        assert threshold_best_response(mu, 0.001).claims.all()

    def test_beats_random_mixed_strategies(self):
        rng = np.random.default_rng(0)
        gamma = 0.4
        for _ in range(20):
            mu = rng.random(6)
            best = threshold_best_response(mu, gamma).claims.astype(float)
            best_cost = np.sum(best * (gamma - mu))
            mixed = rng.random((1000, 6))
            assert np.all(mixed @ (gamma - mu) >= best_cost - 1e-12)

    @pytest.mark.parametrize("gamma", [0.0, 1.0])
    def test_gamma_outside_unit_interval(self, gamma):
        with pytest.raises(PosteriorError):
            BayesAttackerConfig(gamma=gamma)

    def test_mirror_strategy_samples_support(self, tiny_population):
        table = posterior(gaussian_mechanism(0.05), tiny_population, MembershipPrior.uniform(4), np.full(3, 0.4))
        decision = mirror_strategy(table, rng_seed=0)
        assert any((row == decision.claims).all() for row in table.support)


class TestPrivacyLoss:
    def test_always_claim(self, tiny_population):
        q = MembershipPrior.bernoulli(4, 0.5)
        loss = privacy_loss(gaussian_mechanism(0.05), tiny_population, ConstantAttacker(4, True), q, 4000, rng_seed=0)
        # E[Σ b_k] under q conditioned on a non-empty beacon
        assert loss.loss.within(2.0 / (1 - 1 / 16), n_se=3.0)
        assert loss.tpr == 1.0 and loss.fpr == 1.0

    def test_never_claim(self, tiny_population):
        q = MembershipPrior.bernoulli(4, 0.5)
        loss = privacy_loss(gaussian_mechanism(0.05), tiny_population, ConstantAttacker(4, False), q, 500, rng_seed=0)
        assert loss.loss.value == 0.0

    def test_always_claim_bounds_every_attacker(self, tiny_population):
        q = MembershipPrior.bernoulli(4, 0.5)
        mechanism = gaussian_mechanism(0.05)
        attackers = {
            "always": ConstantAttacker(4, True),
            "bayes": BayesThresholdAttacker(PosteriorModel(mechanism, tiny_population, q), 0.5),
        }
        losses = compare_attackers(mechanism, tiny_population, attackers, q, 2000, rng_seed=1)
        assert losses["always"].loss.value >= losses["bayes"].loss.value


class TestMirrorLoss:
    def test_blind_mechanism_closed_form(self):
        # Σ q_k² with the non-empty conditioning applied to both b and the posterior
        population = Population(np.array([[1, 0], [0, 1], [1, 1]]), np.array([0.5, 0.5]))
        q = MembershipPrior.bernoulli(3, 0.4)
        mechanism = gaussian_mechanism(0.1, MeanMap.blind(2))
        z = mirror_strategy_loss(mechanism, population, q, q, 20000, rng_seed=0)
        marginal = 0.4 / (1 - 0.6 ** 3)
        assert z.within(3 * marginal ** 2, n_se=3.0, slack=1e-9)

    def test_perfect_information(self, separable_population):
        q = MembershipPrior.bernoulli(4, 0.5)
        z = mirror_strategy_loss(gaussian_mechanism(1e-8), separable_population, q, q, 2000, rng_seed=1)
        assert z.within(2.0 / (1 - 1 / 16), n_se=3.0, slack=1e-3)

    def test_point_mass_q(self, separable_population):
        b = MembershipVector.from_members(4, [0, 3])
        q = MembershipPrior.point_mass(b)
        z = mirror_strategy_loss(
            gaussian_mechanism(1e-8), separable_population, MembershipPrior.uniform(4), q, 200, rng_seed=2
        )
        assert z.value == pytest.approx(2.0, abs=1e-3)

    def test_matches_quadrature_oracle(self):
        population = Population(
            np.array([[1, 0], [0, 1], [1, 1], [0, 0], [1, 0]]), np.array([0.5, 0.4])
        )
        q = MembershipPrior.bernoulli(5, 0.5)
        mechanism = gaussian_mechanism(0.04)
        oracle = exact_mirror_loss(mechanism, population, q, q, nodes=20)
        z = mirror_strategy_loss(mechanism, population, q, q, 20000, rng_seed=3)
        assert z.within(oracle, n_se=3.0)

    def test_quadrature_needs_small_gaussian(self, tiny_population):
        q = MembershipPrior.bernoulli(4, 0.5)
        with pytest.raises(MechanismError):
            exact_mirror_loss(laplace_mechanism(1.0, 1.0), tiny_population, q, q)


class TestDominance:
    def test_mirror_dominates_best_responses(self):
        population = Population(
            np.array([[1, 0, 1], [0, 1, 1], [1, 1, 0], [0, 0, 1]]), np.array([0.5, 0.4, 0.6])
        )
        q = MembershipPrior.bernoulli(4, 0.5)
        report = mirror_dominance_report(
            gaussian_mechanism(0.05), population, q, q, gamma=0.9, n_samples=5000, n_strategies=100, rng_seed=0
        )
        assert report["mirror>=threshold"]
        assert report["mirror>=sampled"]
        # near-indifferent claims are randomized, so the strategies are not all the threshold rule
        assert report["sampled_distinct"] > 0
        assert report["sampled_min_loss"] < report["sampled_max_loss"]

    def test_dominance_band_must_be_positive(self, tiny_population):
        q = MembershipPrior.bernoulli(4, 0.5)
        with pytest.raises(PosteriorError):
            mirror_dominance_report(gaussian_mechanism(0.05), tiny_population, q, q, 0.5, 100, 2, rng_seed=0, band=0.0)

    def test_aligned_prior_check(self, tiny_population):
        q = MembershipPrior.bernoulli(4, 0.5)
        report = aligned_prior_check(
            gaussian_mechanism(0.05), tiny_population, MembershipPrior.uniform(4), q, 0.5, 2000, rng_seed=0
        )
        assert report["uniform"] and report["aligned"]


@pytest.mark.slow
@pytest.mark.parametrize("sigma_name", ["q", "uniform"])
def test_ordering_holds_over_seeds(sigma_name):
    for seed in range(5):
        population = generate_population(10, 16, rng_seed=seed)
        q = MembershipPrior.bernoulli(10, 0.5)
        sigma = q if sigma_name == "q" else MembershipPrior.uniform(10)
        mechanism = gaussian_mechanism_theorem2(8.0, 16, 5)
        report = verify_theorem1_ordering(
            mechanism, population, q, sigma, 0.05, 20000, rng_seed=seed, calibration_samples=20000
        )
        assert report.holds, report.to_dict()["checks"]


def test_ordering_report_shape(ordering_population, gdp_mechanism):
    q = MembershipPrior.bernoulli(10, 0.5)
    report = verify_theorem1_ordering(
        gdp_mechanism, ordering_population, q, q, 0.05, 1000, rng_seed=0, calibration_samples=2000
    )
    assert set(report.losses) == {"mirror", "optimal", "adaptive", "naive"}
    assert set(report.checks) == {"mirror>=optimal", "optimal>=adaptive", "adaptive>=naive"}
    for loss in report.losses.values():
        assert 0.0 <= loss.loss.value <= 10.0
