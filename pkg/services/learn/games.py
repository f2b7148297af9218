"""
services/learn/games.py - Training the defender generator and the attacker network

Three games share one loop shape (alternating, defender step first):
    train_bne           defender vs the neural Bayesian attacker (general-sum GAN)
    train_lrt_defense   defender vs a sigmoid-smoothed fixed or adaptive LRT
    train_attacker_against
                        neural Bayesian attacker vs any frozen mechanism

Proxies: privacy v(p, b) = Σ_k b_k p_k, attacker cost c_A(p) = Σ_k p_k.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from models.decision import AttackDecision
from models.mechanism import MechanismKind, ReleaseMechanism
from models.population import MembershipPrior, Population
from services.evaluation import roc_auc
from services.learn.nn import Mlp, attacker_architecture, default_q_aux, defender_architecture
from services.learn.optim import Adam, ExponentialLR
from services.lrt import (
    AdaptiveThresholdAttacker,
    FixedThresholdAttacker,
    calibrate_threshold,
    default_adaptive_n,
    expected_beacon_size,
)
from services.mechanisms import sample_releases, zero_noise_mechanism
from services.population import summary_stats_batch, synthesize_reference
from utils.exceptions import ConfigError, EvaluationError, TrainingDivergedError
from utils.io import write_csv
from utils.rng import SeedLike, as_generator, spawn

logger = logging.getLogger(__name__)

LRT_ATTACKS = ("fixed", "adaptive")


@dataclass(frozen=True)
class TrainConfig:
    defender_lr: float = 1e-3
    attacker_lr: float = 1e-4
    weight_decay: float = 1e-5
    lr_decay: float = 0.988
    batch_size: int = 64
    epochs: int = 300
    batches_per_epoch: int = 20
    kappa: Union[float, Sequence[float]] = 0.0
    gamma: float = 0.5
    kappa_on_privacy: bool = False
    q_aux: Optional[int] = None
    batch_norm: bool = True
    clip: bool = True
    seed: int = 0
    eval_beacons: int = 64
    alpha: float = 0.05
    calibration_samples: int = 5000
    adaptive_n: Optional[int] = None
    reference_size: Optional[int] = None
    soft_temperature: float = 0.1
    temperature_decay: float = 0.98
    min_temperature: float = 0.01
    defender_hidden: Optional[Sequence[int]] = None
    attacker_hidden: Optional[Sequence[int]] = None
    log_every: int = 25

    def __post_init__(self):
        for name in ("defender_lr", "attacker_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive", {name: getattr(self, name)})
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError("lr_decay must lie in (0, 1]", {"lr_decay": self.lr_decay})
        if self.batch_size < 2 or self.epochs < 1 or self.batches_per_epoch < 1:
            raise ConfigError("batch_size >= 2, epochs >= 1 and batches_per_epoch >= 1 are required")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie in (0, 1)", {"gamma": self.gamma})
        if np.any(np.asarray(self.kappa, dtype=float) < 0):
            raise ConfigError("kappa must be nonnegative")
        if not self.soft_temperature > 0:
            raise ConfigError("soft_temperature must be positive")

    def kappa_vector(self, num_snvs: int) -> np.ndarray:
        kappa = np.asarray(self.kappa, dtype=float)
        if kappa.ndim and kappa.size != num_snvs:
            raise ConfigError("kappa vector length must equal m", {"expected": num_snvs, "got": int(kappa.size)})
        return np.broadcast_to(kappa, (num_snvs,)).copy()

    def is_vector_kappa(self) -> bool:
        kappa = np.atleast_1d(np.asarray(self.kappa, dtype=float))
        return kappa.size > 1 and not np.all(kappa == kappa[0])

    def temperature(self, epoch: int) -> float:
        return max(self.min_temperature, self.soft_temperature * self.temperature_decay ** (epoch - 1))

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["kappa"] = np.asarray(self.kappa, dtype=float).tolist()
        return payload


# ── generator-backed mechanism ─────────────────────────────────

class GeneratorMechanism:
    """Noise δ = G(b, ν) with ν ~ Uniform[0, 1]^q_aux; δ lies in [-0.5, 0.5] by construction."""

    def __init__(self, model: Mlp, num_individuals: int, q_aux: int):
        if model.input_dim != num_individuals + q_aux:
            raise ConfigError("generator input width must be K + q_aux")
        self.model = model
        self.num_individuals = num_individuals
        self.q_aux = q_aux

    def inputs(self, memberships: np.ndarray, nu: np.ndarray) -> np.ndarray:
        return np.hstack([np.asarray(memberships, dtype=float), nu])

    def sample_noise(self, memberships: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        memberships = np.atleast_2d(memberships)
        nu = rng.random((memberships.shape[0], self.q_aux))
        return self.model.forward(self.inputs(memberships, nu), training=False)

    def as_mechanism(self, clip: bool = True, label: str = "generator") -> ReleaseMechanism:
        return ReleaseMechanism(MechanismKind.generator, clip=clip, generator=self, label=label)


class NeuralAttacker:
    """Network confidences H(r); claims where the confidence exceeds 0.5."""

    def __init__(self, model: Mlp, name: str = "neural-bayes"):
        self.model = model
        self.name = name

    def decide(self, releases: np.ndarray, oracle_b: Optional[np.ndarray] = None) -> AttackDecision:
        single = np.asarray(releases).ndim == 1
        conf = self.model.forward(releases, training=False)
        if single:
            conf = conf[0]
        return AttackDecision(confidences=conf, claims=conf > 0.5)


def attack_mechanism(trained_attacker: Mlp, release) -> AttackDecision:
    values = getattr(release, "values", release)
    return NeuralAttacker(trained_attacker).decide(np.asarray(values, dtype=float))


# ── history ────────────────────────────────────────────────────

HISTORY_COLUMNS = ("epoch", "defender_loss", "attacker_loss", "auc")


@dataclass
class TrainingHistory:
    rows: List[dict] = field(default_factory=list)

    def append(self, epoch: int, defender_loss: float, attacker_loss: float, auc: float) -> None:
        self.rows.append({
            "epoch": epoch,
            "defender_loss": float(defender_loss),
            "attacker_loss": float(attacker_loss),
            "auc": float(auc),
        })

    @property
    def final(self) -> dict:
        return self.rows[-1] if self.rows else {}

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.rows], dtype=float)

    def write_csv(self, path: Union[str, Path]) -> Path:
        return write_csv(path, HISTORY_COLUMNS, ([row[c] for c in HISTORY_COLUMNS] for row in self.rows))

    def to_dict(self) -> dict:
        return {"rows": self.rows}


@dataclass
class TrainingResult:
    generator: Optional[GeneratorMechanism]
    attacker: Optional[Mlp]
    history: TrainingHistory
    info: dict = field(default_factory=dict)


# ── objectives ─────────────────────────────────────────────────

def _release(population: Population, memberships: np.ndarray, delta: np.ndarray, clip: bool):
    """r = R(x + δ) and the mask where dr/dδ = 1."""
    y = summary_stats_batch(population, memberships) + delta
    if not clip:
        return y, np.ones_like(y)
    return np.clip(y, 0.0, 1.0), ((y > 0.0) & (y < 1.0)).astype(float)


def _utility_weights(kappa: np.ndarray, kappa_on_privacy: bool):
    """(per-SNV weight on |δ_j|, weight on the privacy term)."""
    if not kappa_on_privacy:
        return kappa, 1.0
    if not np.all(kappa == kappa[0]):
        raise ConfigError("kappa on the privacy term must be a scalar")
    return np.ones_like(kappa), float(kappa[0])


def _defender_pass(
    generator: GeneratorMechanism,
    attacker: Mlp,
    memberships: np.ndarray,
    nu: np.ndarray,
    kappa: np.ndarray,
    population: Population,
    kappa_on_privacy: bool,
    clip: bool,
    training: bool,
    backward: bool,
):
    b = np.asarray(memberships, dtype=float)
    n = b.shape[0]
    util_w, priv_w = _utility_weights(kappa, kappa_on_privacy)
    delta = generator.model.forward(generator.inputs(b, nu), training)
    r, mask = _release(population, memberships, delta, clip)
    p = attacker.forward(r, training)
    loss = float(np.mean(np.abs(delta) @ util_w + priv_w * np.sum(b * p, axis=1)))
    if not backward:
        return loss, None
    _, d_r = attacker.backward(priv_w * b / n)
    d_delta = d_r * mask + util_w * np.sign(delta) / n
    grads, _ = generator.model.backward(d_delta)
    return loss, grads


def _attacker_pass(attacker: Mlp, releases: np.ndarray, memberships: np.ndarray, gamma: float, training: bool, backward: bool):
    b = np.asarray(memberships, dtype=float)
    n = b.shape[0]
    p = attacker.forward(releases, training)
    loss = float(np.mean(-np.sum(b * p, axis=1) + gamma * np.sum(p, axis=1)))
    if not backward:
        return loss, None
    grads, _ = attacker.backward((gamma - b) / n)
    return loss, grads


def defender_loss(
    generator: GeneratorMechanism,
    attacker: Mlp,
    batch_b,
    batch_nu,
    kappa,
    population: Population,
    kappa_on_privacy: bool = False,
    clip: bool = True,
) -> float:
    """mean_batch[Σ_j κ_j |δ_j| + Σ_k b_k p_k] (κ moves to the privacy term with kappa_on_privacy)."""
    kappa = np.broadcast_to(np.asarray(kappa, dtype=float), (population.num_snvs,)).copy()
    loss, _ = _defender_pass(
        generator, attacker, np.asarray(batch_b).astype(bool), np.asarray(batch_nu, dtype=float),
        kappa, population, kappa_on_privacy, clip, training=False, backward=False,
    )
    return loss


def attacker_loss(
    generator: GeneratorMechanism,
    attacker: Mlp,
    batch_b,
    batch_nu,
    gamma: float,
    population: Population,
    clip: bool = True,
) -> float:
    """mean_batch[−Σ_k b_k p_k + γ Σ_k p_k]; batch_b is drawn from the attacker's prior σ."""
    memberships = np.asarray(batch_b).astype(bool)
    delta = generator.model.forward(generator.inputs(memberships, np.asarray(batch_nu, dtype=float)), training=False)
    releases, _ = _release(population, memberships, delta, clip)
    loss, _ = _attacker_pass(attacker, releases, memberships, gamma, training=False, backward=False)
    return loss


def _check_finite(loss: float, role: str, epoch: int, model: Mlp) -> None:
    if np.isfinite(loss) and all(np.all(np.isfinite(p)) for p in model.parameters()):
        return
    logger.error(f"❌ {role} diverged at epoch {epoch} (loss={loss})")
    raise TrainingDivergedError(f"{role} loss became non-finite", {"epoch": epoch, "loss": repr(loss)})


def _holdout_auc(mechanism: ReleaseMechanism, population: Population, memberships: np.ndarray, score, rng) -> float:
    releases, _, _ = sample_releases(mechanism, population, memberships, rng)
    try:
        return roc_auc(score(releases).ravel(), memberships.ravel()).auc
    except EvaluationError as e:
        logger.warning(f"⚠️ Held-out AUC unavailable: {e.message}")
        return float("nan")


def _build_models(population: Population, config: TrainConfig, rng, against: str = "defender"):
    k, m = population.num_individuals, population.num_snvs
    q_aux = config.q_aux or default_q_aux(k)
    generator = GeneratorMechanism(
        Mlp(k + q_aux, defender_architecture(m, config.is_vector_kappa(), config.batch_norm, config.defender_hidden), rng),
        k,
        q_aux,
    )
    attacker = Mlp(m, attacker_architecture(k, m, against, config.batch_norm, config.attacker_hidden), rng)
    return generator, attacker


def _optimizer(model: Mlp, lr: float, config: TrainConfig):
    opt = Adam(model.parameters(), lr, weight_decay=config.weight_decay)
    return opt, ExponentialLR(opt, config.lr_decay)


def _log_epoch(game: str, epoch: int, config: TrainConfig, d_loss: float, a_loss: float, auc: float) -> None:
    if epoch % config.log_every == 0 or epoch == config.epochs:
        logger.info(f"🧠 [{game}] epoch {epoch}/{config.epochs} D={d_loss:.4f} A={a_loss:.4f} AUC={auc:.4f}")
    else:
        logger.debug(f"[{game}] epoch {epoch} D={d_loss:.4f} A={a_loss:.4f} AUC={auc:.4f}")


# ── games ──────────────────────────────────────────────────────

def train_bne(
    population: Population,
    q: MembershipPrior,
    sigma: MembershipPrior,
    config: TrainConfig,
    rng_seed: SeedLike = None,
) -> TrainingResult:
    """G* in argmin U_D(G, H*), H* in argmin U_A^σ(G*, H): one defender then one attacker step per batch."""
    train_rng, eval_rng = spawn(config.seed if rng_seed is None else rng_seed, 2)
    generator, attacker = _build_models(population, config, train_rng)
    kappa = config.kappa_vector(population.num_snvs)
    d_opt, d_sched = _optimizer(generator.model, config.defender_lr, config)
    a_opt, a_sched = _optimizer(attacker, config.attacker_lr, config)
    holdout = q.sample(eval_rng, config.eval_beacons)
    mechanism = generator.as_mechanism(config.clip)
    history = TrainingHistory()
    bs = config.batch_size

    logger.info(
        f"🚀 Training BNE K={population.num_individuals} m={population.num_snvs} "
        f"κ={np.asarray(config.kappa).tolist()} γ={config.gamma} epochs={config.epochs}"
    )
    for epoch in range(1, config.epochs + 1):
        d_losses, a_losses = [], []
        for _ in range(config.batches_per_epoch):
            b = q.sample(train_rng, bs)
            nu = train_rng.random((bs, generator.q_aux))
            loss_d, grads = _defender_pass(
                generator, attacker, b, nu, kappa, population, config.kappa_on_privacy, config.clip,
                training=True, backward=True,
            )
            _check_finite(loss_d, "defender", epoch, generator.model)
            d_opt.step(grads)

            b = sigma.sample(train_rng, bs)
            nu = train_rng.random((bs, generator.q_aux))
            delta = generator.model.forward(generator.inputs(b, nu), training=True)
            releases, _ = _release(population, b, delta, config.clip)
            loss_a, grads = _attacker_pass(attacker, releases, b, config.gamma, training=True, backward=True)
            _check_finite(loss_a, "attacker", epoch, attacker)
            a_opt.step(grads)
            d_losses.append(loss_d)
            a_losses.append(loss_a)
        d_sched.step()
        a_sched.step()
        auc = _holdout_auc(mechanism, population, holdout, lambda r: attacker.forward(r, training=False), eval_rng)
        history.append(epoch, np.mean(d_losses), np.mean(a_losses), auc)
        _log_epoch("bne", epoch, config, history.final["defender_loss"], history.final["attacker_loss"], auc)

    logger.info(f"✅ BNE training finished: held-out AUC {history.final['auc']:.4f}")
    return TrainingResult(generator, attacker, history, {"q_aux": generator.q_aux})


def _lrs_with_clamp(genotypes: np.ndarray, aafs: np.ndarray, releases: np.ndarray, sizes: np.ndarray):
    floor = (1.0 / (2.0 * sizes))[:, None]
    x = np.clip(releases, floor, 1.0 - floor)
    inside = ((releases > floor) & (releases < 1.0 - floor)).astype(float)
    carry = np.log(aafs) - np.log(x)
    absent = np.log1p(-aafs) - np.log1p(-x)
    return carry @ genotypes.T + absent @ (1.0 - genotypes).T, x, inside


def _lrs_backward(g_ell: np.ndarray, genotypes: np.ndarray, x: np.ndarray, inside: np.ndarray) -> np.ndarray:
    """dL/dr given dL/dℓ; ∂ℓ_k/∂x_j = −d_kj / x_j + (1 − d_kj) / (1 − x_j)."""
    return (-(g_ell @ genotypes) / x + (g_ell @ (1.0 - genotypes)) / (1.0 - x)) * inside


def _lrt_defense_pass(
    generator: GeneratorMechanism,
    memberships: np.ndarray,
    nu: np.ndarray,
    kappa: np.ndarray,
    population: Population,
    genotypes: np.ndarray,
    attack: dict,
    clip: bool,
    temperature: float,
):
    b = np.asarray(memberships, dtype=float)
    n = b.shape[0]
    delta = generator.model.forward(generator.inputs(b, nu), training=True)
    r, mask = _release(population, memberships, delta, clip)
    sizes = b.sum(axis=1)
    aafs = population.reference_aafs
    ell, x, inside = _lrs_with_clamp(genotypes, aafs, r, sizes)

    if attack["kind"] == "fixed":
        tau = attack["threshold"]
    else:
        ref = attack["reference"]
        ell_ref, _, _ = _lrs_with_clamp(ref, aafs, r, sizes)
        theta = np.partition(ell_ref, attack["n"] - 1, axis=1)[:, attack["n"] - 1:attack["n"]]
        a = expit((theta - ell_ref) / temperature)
        a_sum = a.sum(axis=1, keepdims=True)
        tau = (a * ell_ref).sum(axis=1, keepdims=True) / a_sum

    c = expit(tau - ell)
    loss = float(np.mean(np.abs(delta) @ kappa + np.sum(b * c, axis=1)))
    h = b * c * (1.0 - c) / n
    d_r = _lrs_backward(-h, genotypes, x, inside)
    if attack["kind"] == "adaptive":
        g_tau = h.sum(axis=1, keepdims=True)
        g_ref = g_tau * (a - (ell_ref - tau) * a * (1.0 - a) / temperature) / a_sum
        d_r = d_r + _lrs_backward(g_ref, ref, x, inside)
    d_delta = d_r * mask + kappa * np.sign(delta) / n
    grads, _ = generator.model.backward(d_delta)
    return loss, grads, float(np.mean(np.sum(b * c, axis=1)))


def train_lrt_defense(
    population: Population,
    q: MembershipPrior,
    config: TrainConfig,
    attack_kind: str = "fixed",
    threshold: Optional[float] = None,
    reference: Optional[Population] = None,
    rng_seed: SeedLike = None,
) -> TrainingResult:
    """Generator trained against the sigmoid-smoothed LRT rule 1/(1 + exp(−(τ − ℓ))).

    The adaptive variant replaces τ by a soft bottom-N mean of reference LRS
    values, with the N-th order statistic as a stop-gradient pivot and an
    annealed temperature. The history's attacker column is the soft privacy
    term; AUC is that of the hard LRT attacker on held-out beacons.
    """
    if attack_kind not in LRT_ATTACKS:
        raise ConfigError(f"unknown LRT attack '{attack_kind}'", {"allowed": list(LRT_ATTACKS)})
    train_rng, eval_rng = spawn(config.seed if rng_seed is None else rng_seed, 2)
    generator, _ = _build_models(population, config, train_rng)
    kappa = config.kappa_vector(population.num_snvs)
    d_opt, d_sched = _optimizer(generator.model, config.defender_lr, config)
    beacon_size = expected_beacon_size(q)
    genotypes = population.genotypes.astype(float)

    info = {"attack": attack_kind, "q_aux": generator.q_aux}
    if attack_kind == "fixed":
        if threshold is None:
            threshold = calibrate_threshold(
                population, zero_noise_mechanism(), q, config.alpha, config.calibration_samples, train_rng,
                beacon_size=beacon_size,
            ).threshold
        attack = {"kind": "fixed", "threshold": float(threshold)}
        hard = FixedThresholdAttacker(population, threshold, beacon_size)
        info["threshold"] = float(threshold)
    else:
        reference = reference or synthesize_reference(
            population, config.reference_size or population.num_individuals, train_rng
        )
        n = config.adaptive_n or default_adaptive_n(reference.num_individuals)
        attack = {"kind": "adaptive", "reference": reference.genotypes.astype(float), "n": n}
        hard = AdaptiveThresholdAttacker(population, reference, n, beacon_size)
        info.update({"adaptive_n": n, "reference_size": reference.num_individuals})

    holdout = q.sample(eval_rng, config.eval_beacons)
    mechanism = generator.as_mechanism(config.clip)
    history = TrainingHistory()
    bs = config.batch_size
    logger.info(f"🚀 Training {attack_kind}-LRT defense κ={np.asarray(config.kappa).tolist()} epochs={config.epochs}")
    for epoch in range(1, config.epochs + 1):
        temperature = config.temperature(epoch)
        d_losses, privacy = [], []
        for _ in range(config.batches_per_epoch):
            b = q.sample(train_rng, bs)
            nu = train_rng.random((bs, generator.q_aux))
            loss, grads, soft_privacy = _lrt_defense_pass(
                generator, b, nu, kappa, population, genotypes, attack, config.clip, temperature
            )
            _check_finite(loss, "defender", epoch, generator.model)
            d_opt.step(grads)
            d_losses.append(loss)
            privacy.append(soft_privacy)
        d_sched.step()
        auc = _holdout_auc(mechanism, population, holdout, lambda r: hard.decide(r).confidences, eval_rng)
        history.append(epoch, np.mean(d_losses), np.mean(privacy), auc)
        _log_epoch(f"{attack_kind}-lrt", epoch, config, history.final["defender_loss"], history.final["attacker_loss"], auc)

    logger.info(f"✅ {attack_kind}-LRT defense finished: held-out LRT AUC {history.final['auc']:.4f}")
    return TrainingResult(generator, None, history, info)


def train_attacker_against(
    mechanism: ReleaseMechanism,
    population: Population,
    sigma: MembershipPrior,
    config: TrainConfig,
    against: str = "defender",
    q: Optional[MembershipPrior] = None,
    rng_seed: SeedLike = None,
) -> TrainingResult:
    """Neural Bayesian attacker best-responding to a frozen mechanism."""
    train_rng, eval_rng = spawn(config.seed if rng_seed is None else rng_seed, 2)
    k, m = population.num_individuals, population.num_snvs
    attacker = Mlp(m, attacker_architecture(k, m, against, config.batch_norm, config.attacker_hidden), train_rng)
    a_opt, a_sched = _optimizer(attacker, config.attacker_lr, config)
    holdout = (q or sigma).sample(eval_rng, config.eval_beacons)
    history = TrainingHistory()
    bs = config.batch_size
    logger.info(f"🚀 Training attacker against {mechanism.label or mechanism.kind.value} epochs={config.epochs}")
    for epoch in range(1, config.epochs + 1):
        a_losses = []
        for _ in range(config.batches_per_epoch):
            b = sigma.sample(train_rng, bs)
            releases, _, _ = sample_releases(mechanism, population, b, train_rng)
            loss, grads = _attacker_pass(attacker, releases, b, config.gamma, training=True, backward=True)
            _check_finite(loss, "attacker", epoch, attacker)
            a_opt.step(grads)
            a_losses.append(loss)
        a_sched.step()
        auc = _holdout_auc(mechanism, population, holdout, lambda r: attacker.forward(r, training=False), eval_rng)
        history.append(epoch, float("nan"), np.mean(a_losses), auc)
        _log_epoch("attacker", epoch, config, float("nan"), history.final["attacker_loss"], auc)
    return TrainingResult(None, attacker, history, {"against": against})
