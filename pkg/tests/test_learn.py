import numpy as np
import pytest

from models.population import MembershipPrior
from services.evaluation import roc_auc
from services.learn import (
    GeneratorMechanism,
    NeuralAttacker,
    TrainConfig,
    attack_mechanism,
    attacker_loss,
    defender_loss,
    load_checkpoint,
    save_checkpoint,
    train_attacker_against,
    train_bne,
    train_lrt_defense,
)
from services.learn.games import _check_finite, _defender_pass, _lrt_defense_pass
from services.learn.nn import (
    LayerSpec,
    Mlp,
    attacker_architecture,
    default_q_aux,
    defender_architecture,
)
from services.learn.optim import Adam, ExponentialLR
from services.mechanisms import sample_releases, zero_noise_mechanism
from services.population import AafDistribution, generate_population
from utils.exceptions import ConfigError, TrainingDivergedError

FD_EPS = 1e-6


def numerical_grads(loss_fn, params):
    """Central differences, perturbing each parameter array in place."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + FD_EPS
            up = loss_fn()
            p[idx] = old - FD_EPS
            down = loss_fn()
            p[idx] = old
            g[idx] = (up - down) / (2 * FD_EPS)
        out.append(g)
    return out


def tiny_config(**overrides) -> TrainConfig:
    settings = dict(
        epochs=3,
        batches_per_epoch=2,
        batch_size=8,
        defender_hidden=[8],
        attacker_hidden=[8],
        eval_beacons=16,
        log_every=1,
    )
    settings.update(overrides)
    return TrainConfig(**settings)


# ── networks ───────────────────────────────────────────────────

class TestGradients:
    @pytest.mark.parametrize("activation", ["relu", "leaky_relu", "sigmoid", "scaled_sigmoid"])
    @pytest.mark.parametrize("batch_norm", [False, True])
    def test_parameter_gradients(self, activation, batch_norm):
        rng = np.random.default_rng(0)
        model = Mlp(4, [LayerSpec(5, activation, batch_norm), LayerSpec(3, "sigmoid")], rng_seed=1)
        x = rng.normal(size=(6, 4))
        upstream = rng.normal(size=(6, 3))

        def loss():
            return float(np.sum(upstream * model.forward(x, training=True)))

        loss()
        grads, _ = model.backward(upstream)
        for analytic, numeric in zip(grads, numerical_grads(loss, model.parameters())):
            np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7)

    def test_input_gradient(self):
        rng = np.random.default_rng(2)
        model = Mlp(3, [LayerSpec(4, "leaky_relu", True), LayerSpec(2, "scaled_sigmoid")], rng_seed=3)
        x = rng.normal(size=(5, 3))
        upstream = rng.normal(size=(5, 2))

        def loss():
            return float(np.sum(upstream * model.forward(x, training=True)))

        loss()
        _, dx = model.backward(upstream)
        (numeric,) = numerical_grads(loss, [x])
        np.testing.assert_allclose(dx, numeric, rtol=1e-4, atol=1e-7)

    def test_defender_pass_gradient(self):
        rng = np.random.default_rng(4)
        population = generate_population(3, 5, AafDistribution(kind="uniform", low=0.3, high=0.7), rng_seed=5)
        generator = GeneratorMechanism(Mlp(4, [LayerSpec(3, "leaky_relu"), LayerSpec(5, "scaled_sigmoid")], 6), 3, 1)
        attacker = Mlp(5, [LayerSpec(4, "relu"), LayerSpec(3, "sigmoid")], rng_seed=7)
        b = np.array([[1, 0, 1], [1, 1, 1], [0, 1, 0], [0, 0, 1]], dtype=bool)
        nu = rng.random((4, 1))
        kappa = np.full(5, 0.7)

        def run(backward):
            return _defender_pass(generator, attacker, b, nu, kappa, population, False, False, True, backward)

        _, grads = run(True)
        numeric = numerical_grads(lambda: run(False)[0], generator.model.parameters())
        for analytic, approx in zip(grads, numeric):
            np.testing.assert_allclose(analytic, approx, rtol=1e-4, atol=1e-7)

    def test_fixed_lrt_pass_gradient(self):
        rng = np.random.default_rng(8)
        population = generate_population(4, 6, AafDistribution(kind="uniform", low=0.3, high=0.7), rng_seed=9)
        generator = GeneratorMechanism(Mlp(5, [LayerSpec(3, "relu"), LayerSpec(6, "scaled_sigmoid")], 10), 4, 1)
        b = np.array([[1, 0, 1, 1], [1, 1, 0, 0], [0, 1, 1, 1]], dtype=bool)
        nu = rng.random((3, 1))
        kappa = np.full(6, 0.2)
        genotypes = population.genotypes.astype(float)
        attack = {"kind": "fixed", "threshold": 0.3}

        def run():
            return _lrt_defense_pass(generator, b, nu, kappa, population, genotypes, attack, False, 1.0)

        _, grads, _ = run()
        numeric = numerical_grads(lambda: run()[0], generator.model.parameters())
        for analytic, approx in zip(grads, numeric):
            np.testing.assert_allclose(analytic, approx, rtol=1e-4, atol=1e-7)


class TestNetworks:
    def test_zero_weight_sigmoid_outputs_half(self):
        model = Mlp(3, [LayerSpec(2, "sigmoid")], init="zeros")
        np.testing.assert_allclose(model.forward(np.ones((4, 3))), 0.5)

    def test_zero_weight_generator_adds_no_noise(self):
        model = Mlp(3, [LayerSpec(2, "scaled_sigmoid")], init="zeros")
        np.testing.assert_allclose(model.forward(np.ones((4, 3))), 0.0)

    def test_untrained_attacker_has_chance_auc(self):
        attacker = NeuralAttacker(Mlp(5, [LayerSpec(4, "sigmoid")], init="zeros"))
        decision = attacker.decide(np.random.default_rng(0).random((10, 5)))
        np.testing.assert_allclose(decision.confidences, 0.5)
        assert not decision.claims.any()
        labels = np.arange(40).reshape(10, 4) % 3 == 0
        assert roc_auc(decision.confidences.ravel(), labels.ravel()).auc == pytest.approx(0.5)

    def test_single_release_shape(self):
        model = Mlp(5, [LayerSpec(4, "sigmoid")], rng_seed=0)
        decision = attack_mechanism(model, np.full(5, 0.3))
        assert decision.confidences.shape == (4,)

    def test_batch_norm_needs_two_rows(self):
        model = Mlp(3, [LayerSpec(2, "relu", True)], rng_seed=0)
        with pytest.raises(ConfigError):
            model.forward(np.ones((1, 3)), training=True)

    def test_input_width_checked(self):
        with pytest.raises(ConfigError):
            Mlp(3, [LayerSpec(2)], rng_seed=0).forward(np.ones((2, 4)))

    def test_unknown_activation(self):
        with pytest.raises(ConfigError):
            LayerSpec(3, "tanh")

    def test_reference_architectures(self):
        defender = defender_architecture(5000)
        assert [layer.out_features for layer in defender] == [1500, 1100, 500, 5000]
        assert [layer.activation for layer in defender] == ["relu", "relu", "leaky_relu", "scaled_sigmoid"]
        assert [layer.out_features for layer in defender_architecture(5000, vector_kappa=True)][:3] == [1000, 3000, 4600]
        attacker = attacker_architecture(800, 5000)
        assert [layer.out_features for layer in attacker] == [3400, 2000, 800]
        assert [layer.out_features for layer in attacker_architecture(800, 5000, "dp")][:2] == [3000, 1000]
        assert default_q_aux(800) == 30

    def test_architectures_scale_with_snvs(self):
        assert [layer.out_features for layer in defender_architecture(500)][:3] == [150, 110, 50]

    def test_generator_noise_range_is_fixed(self):
        with pytest.raises(ConfigError):
            defender_architecture(10, noise_range=(-1.0, 1.0))


# ── optimizer ──────────────────────────────────────────────────

class TestOptimizer:
    def test_first_step_moves_by_learning_rate(self):
        p = np.array([3.0, -2.0])
        Adam([p], lr=0.1).step([np.array([10.0, -0.5])])
        np.testing.assert_allclose(p, [2.9, -1.9], atol=1e-6)

    def test_weight_decay_enters_the_gradient(self):
        p = np.array([1.0])
        Adam([p], lr=0.1, weight_decay=0.1).step([np.zeros(1)])
        np.testing.assert_allclose(p, [0.9], atol=1e-6)

    def test_minimizes_quadratic(self):
        p = np.array([5.0, -3.0])
        opt = Adam([p], lr=0.1)
        for _ in range(2000):
            opt.step([2 * p])
        assert np.abs(p).max() < 0.1

    def test_exponential_decay(self):
        opt = Adam([np.zeros(1)], lr=1e-3)
        scheduler = ExponentialLR(opt, 0.988)
        for _ in range(3):
            scheduler.step()
        assert opt.lr == pytest.approx(1e-3 * 0.988 ** 3)

    def test_invalid_settings(self):
        with pytest.raises(ConfigError):
            Adam([np.zeros(1)], lr=0.0)
        with pytest.raises(ConfigError):
            Adam([np.zeros(1)], weight_decay=-1.0)
        opt = Adam([np.zeros(1)])
        for gamma in (0.0, 1.5):
            with pytest.raises(ConfigError):
                ExponentialLR(opt, gamma)
        with pytest.raises(ConfigError):
            opt.step([np.zeros(1), np.zeros(1)])


# ── objectives ─────────────────────────────────────────────────

class TestObjectives:
    @pytest.fixture
    def zero_nets(self):
        generator = GeneratorMechanism(Mlp(3, [LayerSpec(4, "leaky_relu"), LayerSpec(2, "scaled_sigmoid")], init="zeros"), 2, 1)
        attacker = Mlp(2, [LayerSpec(2, "sigmoid")], init="zeros")
        return generator, attacker

    def test_defender_loss_hand_value(self, toy_population, zero_nets):
        generator, attacker = zero_nets
        b = [[1, 0], [1, 1]]
        nu = [[0.3], [0.8]]
        # δ = 0 and p = 0.5: mean(0.5 · |b|)
        assert defender_loss(generator, attacker, b, nu, 1.0, toy_population) == pytest.approx(0.75)

    def test_kappa_on_privacy_scales_privacy_term(self, toy_population, zero_nets):
        generator, attacker = zero_nets
        loss = defender_loss(generator, attacker, [[1, 0], [1, 1]], [[0.3], [0.8]], 2.0, toy_population, True)
        assert loss == pytest.approx(1.5)

    def test_attacker_loss_hand_value(self, toy_population, zero_nets):
        generator, attacker = zero_nets
        # mean(−0.5 |b| + γ · 0.5 · K)
        loss = attacker_loss(generator, attacker, [[1, 0], [1, 1]], [[0.1], [0.2]], 0.5, toy_population)
        assert loss == pytest.approx(-0.25)

    def test_generator_noise_stays_in_range(self, small_population):
        model = Mlp(13, defender_architecture(40, batch_norm=False, hidden=[16]), rng_seed=0)
        generator = GeneratorMechanism(model, 12, 1)
        memberships = MembershipPrior.bernoulli(12, 0.5).sample(np.random.default_rng(1), 50)
        noise = generator.sample_noise(memberships, np.random.default_rng(2))
        assert noise.min() >= -0.5 and noise.max() <= 0.5
        values, _, _ = sample_releases(generator.as_mechanism(clip=True), small_population, memberships, rng_seed=3)
        assert values.min() >= 0.0 and values.max() <= 1.0

    def test_generator_input_width_checked(self):
        with pytest.raises(ConfigError):
            GeneratorMechanism(Mlp(4, [LayerSpec(2)], rng_seed=0), 2, 1)

    def test_non_finite_parameters_abort(self):
        model = Mlp(2, [LayerSpec(2)], rng_seed=0)
        model.parameters()[0][0, 0] = np.nan
        with pytest.raises(TrainingDivergedError):
            _check_finite(0.1, "defender", 4, model)


class TestTrainConfig:
    @pytest.mark.parametrize("overrides", [
        {"defender_lr": 0.0},
        {"lr_decay": 1.5},
        {"batch_size": 1},
        {"epochs": 0},
        {"gamma": 1.0},
        {"kappa": -1.0},
        {"soft_temperature": 0.0},
    ])
    def test_invalid_values(self, overrides):
        with pytest.raises(ConfigError):
            TrainConfig(**overrides)

    def test_kappa_vector(self):
        config = TrainConfig(kappa=[1.0, 50.0, 1.0])
        assert config.is_vector_kappa()
        np.testing.assert_allclose(config.kappa_vector(3), [1.0, 50.0, 1.0])
        with pytest.raises(ConfigError):
            config.kappa_vector(4)
        assert not TrainConfig(kappa=1.5).is_vector_kappa()

    def test_reference_defaults(self):
        config = TrainConfig()
        assert (config.defender_lr, config.weight_decay, config.lr_decay) == (1e-3, 1e-5, 0.988)


# ── games ──────────────────────────────────────────────────────

class TestGames:
    def test_bne_smoke(self, small_population, half_prior):
        result = train_bne(small_population, half_prior(12), half_prior(12), tiny_config(kappa=1.0))
        assert len(result.history.rows) == 3
        assert np.all(np.isfinite(result.history.column("defender_loss")))
        assert 0.0 <= result.history.final["auc"] <= 1.0

    def test_bne_is_deterministic(self, small_population, half_prior):
        a = train_bne(small_population, half_prior(12), half_prior(12), tiny_config(epochs=2))
        b = train_bne(small_population, half_prior(12), half_prior(12), tiny_config(epochs=2))
        assert a.history.rows == b.history.rows

    @pytest.mark.parametrize("attack_kind", ["fixed", "adaptive"])
    def test_lrt_defense_smoke(self, small_population, half_prior, attack_kind):
        threshold = 0.0 if attack_kind == "fixed" else None
        result = train_lrt_defense(small_population, half_prior(12), tiny_config(), attack_kind, threshold=threshold)
        assert result.attacker is None
        assert result.info["attack"] == attack_kind
        assert np.all(np.isfinite(result.history.column("attacker_loss")))

    def test_unknown_lrt_attack(self, small_population, half_prior):
        with pytest.raises(ConfigError):
            train_lrt_defense(small_population, half_prior(12), tiny_config(), "optimal")

    def test_attacker_learns_separable_task(self):
        population = generate_population(4, 20, AafDistribution(kind="point", value=0.5), rng_seed=0)
        config = TrainConfig(
            epochs=100, batches_per_epoch=10, batch_size=32, attacker_lr=1e-2,
            attacker_hidden=[32], batch_norm=False, eval_beacons=64, seed=1,
        )
        result = train_attacker_against(zero_noise_mechanism(), population, MembershipPrior.bernoulli(4, 0.5), config)
        assert result.history.final["auc"] >= 0.95

    def test_checkpoint_round_trip(self, tmp_path, small_population, half_prior):
        config = tiny_config(epochs=2)
        result = train_bne(small_population, half_prior(12), half_prior(12), config)
        save_checkpoint(tmp_path / "ckpt", result, config)
        restored = load_checkpoint(tmp_path / "ckpt")

        inputs = result.generator.inputs(np.ones((3, 12)), np.full((3, result.generator.q_aux), 0.5))
        np.testing.assert_allclose(
            restored.generator.model.forward(inputs), result.generator.model.forward(inputs)
        )
        releases = np.full((2, 40), 0.4)
        np.testing.assert_allclose(restored.attacker.forward(releases), result.attacker.forward(releases))
        assert restored.history.rows == result.history.rows

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(ConfigError):
            load_checkpoint(tmp_path / "absent")

    def test_history_csv(self, tmp_path, small_population, half_prior):
        result = train_bne(small_population, half_prior(12), half_prior(12), tiny_config(epochs=2))
        lines = result.history.write_csv(tmp_path / "history.csv").read_text().splitlines()
        assert lines[0] == "epoch,defender_loss,attacker_loss,auc"
        assert len(lines) == 3


@pytest.mark.slow
def test_bayesian_defense_auc_rises_with_kappa():
    population = generate_population(20, 40, rng_seed=0)
    q = MembershipPrior.bernoulli(20, 0.5)
    aucs = {}
    for kappa in (0.0, 50.0):
        runs = []
        for seed in range(3):
            config = TrainConfig(
                kappa=kappa, epochs=60, batches_per_epoch=10, batch_size=32, attacker_lr=1e-3,
                defender_hidden=[64, 64, 32], attacker_hidden=[64, 32], eval_beacons=64, seed=seed,
            )
            runs.append(train_bne(population, q, q, config).history.final["auc"])
        aucs[kappa] = np.mean(runs)
    assert aucs[0.0] <= 0.60
    assert aucs[0.0] < aucs[50.0]
