"""
services/bayes.py - The σ-Bayesian attacker

Posterior over membership vectors, interim threshold best response, the
mirror strategy and its worst-case loss Z(g_D, σ), Monte Carlo privacy
loss of arbitrary attackers, and the ordering check between Bayesian and
LRT attackers.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import logsumexp

from config import settings
from models.decision import AttackDecision
from models.mechanism import MechanismKind, ReleaseMechanism
from models.population import MembershipPrior, Population, PriorKind
from services.lrt import (
    AdaptiveThresholdAttacker,
    FixedThresholdAttacker,
    OptimalLrtAttacker,
    calibrate_adaptive_offset,
    calibrate_threshold,
    default_adaptive_n,
    expected_beacon_size,
)
from services.mechanisms import log_likelihood_matrix, release_means, sample_releases
from services.population import synthesize_reference
from utils.estimates import Estimate, combined_se
from utils.exceptions import MechanismError, PosteriorError
from utils.rng import SeedLike, as_generator, stream_seed

logger = logging.getLogger(__name__)

STRATEGIES = ("mirror", "threshold")
POSTERIOR_METHODS = ("enumerate", "importance")
# (releases x support) cells evaluated per chunk
_POSTERIOR_CHUNK = 2_000_000


@dataclass(frozen=True)
class BayesAttackerConfig:
    gamma: float = 0.5
    strategy: str = "threshold"
    posterior_method: str = "enumerate"
    importance_samples: int = 4096

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise PosteriorError("gamma must lie in (0, 1)", {"gamma": self.gamma})
        if self.strategy not in STRATEGIES:
            raise PosteriorError(f"unknown strategy '{self.strategy}'", {"allowed": list(STRATEGIES)})
        if self.posterior_method not in POSTERIOR_METHODS:
            raise PosteriorError(
                f"unknown posterior method '{self.posterior_method}'", {"allowed": list(POSTERIOR_METHODS)}
            )


@dataclass(frozen=True, eq=False)
class PosteriorTable:
    """Normalized posterior μ_σ(b | r) over the vectors with positive mass."""

    support: np.ndarray
    log_weights: np.ndarray
    marginals: np.ndarray
    ess: float
    method: str = "enumerate"

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def to_dict(self) -> dict:
        return {
            "support": self.support.astype(int).tolist(),
            "weights": self.weights.tolist(),
            "marginals": self.marginals.tolist(),
            "ess": self.ess,
            "method": self.method,
        }


class PosteriorModel:
    """Prior support, prior log-weights and arm means, shared across many releases.

    With K <= max_enumeration_k (or a table prior) the support is every
    non-empty vector with prior mass; otherwise it is a sample from σ and
    the posterior is self-normalized importance sampling with σ as proposal.
    """

    def __init__(
        self,
        mechanism: ReleaseMechanism,
        population: Population,
        sigma: MembershipPrior,
        method: Optional[str] = None,
        importance_samples: int = 4096,
        max_enumeration_k: Optional[int] = None,
        rng_seed: SeedLike = None,
    ):
        if not mechanism.has_density:
            raise MechanismError(
                "posterior needs an un-clipped mechanism with a density", {"mechanism": mechanism.label}
            )
        if sigma.num_individuals != population.num_individuals:
            raise PosteriorError("prior and population disagree on K")
        max_k = max_enumeration_k or settings.MAX_ENUMERATION_K
        if method is None:
            method = "enumerate" if sigma.kind == PriorKind.table or sigma.num_individuals <= max_k else "importance"
        self.mechanism = mechanism
        self.population = population
        self.sigma = sigma
        self.method = method
        if method == "enumerate":
            self.support = sigma.enumerable_support(max_k)
            self.log_prior = sigma.log_prob(self.support)
        else:
            self.support = sigma.sample(as_generator(rng_seed), importance_samples)
            self.log_prior = np.zeros(self.support.shape[0])
        self.support_means = release_means(mechanism, population, self.support)
        self._support_f = self.support.astype(float)

    def log_posterior(self, releases: np.ndarray) -> np.ndarray:
        """Normalized log posterior, shape (n, S)."""
        releases = np.atleast_2d(np.asarray(releases, dtype=float))
        ll = log_likelihood_matrix(
            self.mechanism, self.population, self.support, releases, support_means=self.support_means
        )
        joint = ll + self.log_prior
        norm = logsumexp(joint, axis=1, keepdims=True)
        if not np.all(np.isfinite(norm)):
            bad = np.flatnonzero(~np.isfinite(norm[:, 0]))
            raise PosteriorError(
                "every posterior weight underflowed for some release",
                {"releases": bad[:10].tolist(), "support": int(self.support.shape[0])},
            )
        return joint - norm

    def marginals(self, releases: np.ndarray) -> np.ndarray:
        """μ_k = P(b_k = 1 | r) for each release, shape (n, K)."""
        releases = np.atleast_2d(np.asarray(releases, dtype=float))
        step = max(1, _POSTERIOR_CHUNK // max(1, self.support.shape[0]))
        out = [
            np.exp(self.log_posterior(releases[s:s + step])) @ self._support_f
            for s in range(0, releases.shape[0], step)
        ]
        return np.clip(np.concatenate(out), 0.0, 1.0)

    def table(self, release: np.ndarray) -> PosteriorTable:
        log_w = self.log_posterior(release)[0]
        keep = np.isfinite(log_w)
        weights = np.exp(log_w[keep])
        ess = float(1.0 / np.sum(weights ** 2))
        if self.method == "importance" and ess < 0.01 * self.support.shape[0]:
            logger.warning(f"⚠️ Importance posterior is degenerate: ESS {ess:.1f} of {self.support.shape[0]}")
        return PosteriorTable(
            support=self.support[keep],
            log_weights=log_w[keep],
            marginals=np.clip(weights @ self._support_f[keep], 0.0, 1.0),
            ess=ess,
            method=self.method,
        )

    def sample_vectors(self, releases: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One draw b' ~ μ_σ(· | r) per release (Gumbel-max over the support)."""
        releases = np.atleast_2d(np.asarray(releases, dtype=float))
        step = max(1, _POSTERIOR_CHUNK // max(1, self.support.shape[0]))
        picks = []
        for s in range(0, releases.shape[0], step):
            log_post = self.log_posterior(releases[s:s + step])
            picks.append(np.argmax(log_post + rng.gumbel(size=log_post.shape), axis=1))
        return self.support[np.concatenate(picks)]


def posterior(
    mechanism: ReleaseMechanism,
    population: Population,
    sigma: MembershipPrior,
    release,
    method: Optional[str] = None,
    importance_samples: int = 4096,
    rng_seed: SeedLike = None,
) -> PosteriorTable:
    """μ_σ(b | r) ∝ ρ_D(r | b) σ(b), normalized with log-sum-exp."""
    model = PosteriorModel(mechanism, population, sigma, method, importance_samples, rng_seed=rng_seed)
    return model.table(np.asarray(getattr(release, "values", release), dtype=float))


def posterior_marginals_batch(
    mechanism: ReleaseMechanism, population: Population, sigma: MembershipPrior, releases
) -> np.ndarray:
    return PosteriorModel(mechanism, population, sigma).marginals(releases)


# ── strategies ─────────────────────────────────────────────────

def threshold_best_response(posterior_or_marginals, gamma: float) -> AttackDecision:
    """s_k = 1 iff μ_k > γ; minimizes Σ_k s_k (γ − μ_k) at the observed r."""
    mu = getattr(posterior_or_marginals, "marginals", posterior_or_marginals)
    mu = np.asarray(mu, dtype=float)
    return AttackDecision(confidences=mu, claims=mu > gamma)


def mirror_strategy(table: PosteriorTable, rng_seed: SeedLike = None) -> AttackDecision:
    """Claim vector drawn from the posterior over membership vectors."""
    rng = as_generator(rng_seed)
    pick = rng.choice(table.support.shape[0], p=table.weights / table.weights.sum())
    return AttackDecision(confidences=table.marginals, claims=table.support[pick])


class BayesThresholdAttacker:
    name = "bayes-threshold"

    def __init__(self, model: PosteriorModel, gamma: float):
        BayesAttackerConfig(gamma=gamma)
        self.model = model
        self.gamma = float(gamma)

    def decide(self, releases: np.ndarray, oracle_b: Optional[np.ndarray] = None) -> AttackDecision:
        single = np.asarray(releases).ndim == 1
        mu = self.model.marginals(releases)
        return threshold_best_response(mu[0] if single else mu, self.gamma)


class MirrorAttacker:
    """Samples s ~ μ_σ(· | r). With `expected=True` privacy losses score Σ μ_k b_k instead of a draw."""

    name = "mirror"

    def __init__(self, model: PosteriorModel, rng_seed: SeedLike = None, expected: bool = False):
        self.model = model
        self.rng = as_generator(rng_seed)
        self.score_confidences = expected

    def decide(self, releases: np.ndarray, oracle_b: Optional[np.ndarray] = None) -> AttackDecision:
        single = np.asarray(releases).ndim == 1
        mu = self.model.marginals(releases)
        claims = self.model.sample_vectors(releases, self.rng)
        if single:
            mu, claims = mu[0], claims[0]
        return AttackDecision(confidences=mu, claims=claims)


class ConstantAttacker:
    """Always claims (or never claims) every individual."""

    def __init__(self, num_individuals: int, claim: bool = True):
        self.num_individuals = num_individuals
        self.claim = bool(claim)
        self.name = "always-claim" if claim else "never-claim"

    def decide(self, releases: np.ndarray, oracle_b: Optional[np.ndarray] = None) -> AttackDecision:
        shape = np.asarray(releases).shape[:-1] + (self.num_individuals,)
        return AttackDecision(np.full(shape, float(self.claim)), np.full(shape, self.claim))


# ── privacy loss ───────────────────────────────────────────────

@dataclass(frozen=True)
class PrivacyLoss:
    """E[Σ_k s_k b_k] with its standard error, plus pooled TPR / FPR of the claims."""

    loss: Estimate
    tpr: float
    fpr: float

    def to_dict(self) -> dict:
        return {**self.loss.to_dict(), "tpr": self.tpr, "fpr": self.fpr}


def _hits(attacker, decision: AttackDecision, memberships: np.ndarray) -> np.ndarray:
    if getattr(attacker, "score_confidences", False):
        return np.sum(decision.confidences * memberships, axis=1)
    return np.sum(decision.claims & memberships, axis=1).astype(float)


def compare_attackers(
    mechanism: ReleaseMechanism,
    population: Population,
    attackers: Dict[str, object],
    q: MembershipPrior,
    n_samples: int = 20000,
    rng_seed: SeedLike = None,
    batch_size: int = 1024,
) -> Dict[str, PrivacyLoss]:
    """Privacy losses of several attackers on the same (b, r) draws."""
    rng = as_generator(rng_seed)
    hits = {name: [] for name in attackers}
    claimed_pos = dict.fromkeys(attackers, 0.0)
    claimed_neg = dict.fromkeys(attackers, 0.0)
    n_pos = n_neg = 0.0
    remaining = int(n_samples)
    while remaining > 0:
        n = min(batch_size, remaining)
        memberships = q.sample(rng, n)
        releases, _, _ = sample_releases(mechanism, population, memberships, rng)
        n_pos += memberships.sum()
        n_neg += (~memberships).sum()
        for name, attacker in attackers.items():
            decision = attacker.decide(releases, oracle_b=memberships)
            hits[name].append(_hits(attacker, decision, memberships))
            claimed_pos[name] += float(np.sum(decision.claims & memberships))
            claimed_neg[name] += float(np.sum(decision.claims & ~memberships))
        remaining -= n
    results = {}
    for name in attackers:
        results[name] = PrivacyLoss(
            loss=Estimate.from_draws(np.concatenate(hits[name])),
            tpr=claimed_pos[name] / n_pos if n_pos else float("nan"),
            fpr=claimed_neg[name] / n_neg if n_neg else float("nan"),
        )
        logger.debug(f"Privacy loss [{name}]: {results[name].loss.value:.4f} ± {results[name].loss.se:.4f}")
    return results


def privacy_loss(
    mechanism: ReleaseMechanism,
    population: Population,
    attacker,
    q: MembershipPrior,
    n_samples: int = 20000,
    rng_seed: SeedLike = None,
) -> PrivacyLoss:
    """L(g_D, h_A) = E[Σ_k s_k b_k] with b ~ q, r ~ ρ_D(· | b)."""
    name = getattr(attacker, "name", "attacker")
    return compare_attackers(mechanism, population, {name: attacker}, q, n_samples, rng_seed)[name]


def mirror_strategy_loss(
    mechanism: ReleaseMechanism,
    population: Population,
    sigma: MembershipPrior,
    q: MembershipPrior,
    n_samples: int = 20000,
    rng_seed: SeedLike = None,
) -> Estimate:
    """Z(g_D, σ): Monte Carlo E[Σ_k μ_σ(b'_k = 1 | r) b_k]."""
    rng = as_generator(rng_seed)
    model = PosteriorModel(mechanism, population, sigma, rng_seed=rng)
    attacker = MirrorAttacker(model, rng, expected=True)
    return privacy_loss(mechanism, population, attacker, q, n_samples, rng).loss


def exact_mirror_loss(
    mechanism: ReleaseMechanism,
    population: Population,
    sigma: MembershipPrior,
    q: MembershipPrior,
    nodes: int = 12,
    max_dimensions: int = 4,
) -> float:
    """Z(g_D, σ) by enumerating b and Gauss–Hermite quadrature over r.

    Only for Gaussian mechanisms with m <= max_dimensions; the tensor grid has
    nodes**m points per membership vector.
    """
    if mechanism.kind != MechanismKind.gaussian or mechanism.clip:
        raise MechanismError("quadrature oracle needs an un-clipped Gaussian mechanism")
    m = population.num_snvs
    if m > max_dimensions:
        raise MechanismError("quadrature grid too large", {"num_snvs": m, "max": max_dimensions})
    model = PosteriorModel(mechanism, population, sigma, method="enumerate")
    outer = q.enumerable_support(settings.MAX_ENUMERATION_K)
    log_q = q.log_prob(outer)
    q_weights = np.exp(log_q - logsumexp(log_q))

    x, w = hermegauss(nodes)
    w = w / np.sqrt(2.0 * np.pi)
    grid = np.stack(np.meshgrid(*([x] * m), indexing="ij"), axis=-1).reshape(-1, m)
    grid_w = np.prod(np.stack(np.meshgrid(*([w] * m), indexing="ij"), axis=-1).reshape(-1, m), axis=1)
    sd = np.sqrt(np.broadcast_to(mechanism.variances, (m,)))
    means = release_means(mechanism, population, outer)

    total = 0.0
    for b, qb, mean in zip(outer, q_weights, means):
        mu = model.marginals(mean + grid * sd)
        total += qb * float(grid_w @ (mu @ b.astype(float)))
    return total


# ── ordering and dominance checks ──────────────────────────────

@dataclass
class OrderingReport:
    losses: Dict[str, PrivacyLoss]
    checks: Dict[str, bool]
    calibration: Dict[str, dict] = field(default_factory=dict)
    n_se: float = 3.0

    @property
    def holds(self) -> bool:
        return all(self.checks.values())

    def to_dict(self) -> dict:
        return {
            "losses": {k: v.to_dict() for k, v in self.losses.items()},
            "checks": dict(self.checks),
            "calibration": self.calibration,
            "n_se": self.n_se,
        }


def _ordered(upper: PrivacyLoss, lower: PrivacyLoss, n_se: float) -> bool:
    return upper.loss.value - lower.loss.value >= -n_se * combined_se(upper.loss, lower.loss)


def verify_theorem1_ordering(
    mechanism: ReleaseMechanism,
    population: Population,
    q: MembershipPrior,
    sigma: MembershipPrior,
    alpha: float = 0.05,
    n_samples: int = 20000,
    rng_seed: SeedLike = None,
    reference: Optional[Population] = None,
    adaptive_n: Optional[int] = None,
    calibration_samples: Optional[int] = None,
    n_se: float = 3.0,
) -> OrderingReport:
    """Z = L^σ >= L_opt(α) >= L_adaptive >= L_naive(α), all four on common draws.

    The naive threshold and the adaptive offset are calibrated by simulating
    beacons under q so that each test has (mean) significance α.
    """
    seed = rng_seed if isinstance(rng_seed, int) else None
    rng = as_generator(rng_seed)
    calibration_samples = calibration_samples or settings.CALIBRATION_SAMPLES
    beacon_size = expected_beacon_size(q)
    if reference is None:
        reference = synthesize_reference(population, max(20, population.num_individuals), rng)
    n = adaptive_n or default_adaptive_n(reference.num_individuals)

    naive_cal = calibrate_threshold(
        population, mechanism, q, alpha, calibration_samples, stream_seed(seed, 1) if seed is not None else rng,
        beacon_size=beacon_size,
    )
    adaptive = AdaptiveThresholdAttacker(population, reference, n, beacon_size)
    offset_cal = calibrate_adaptive_offset(
        adaptive, mechanism, q, alpha, calibration_samples, stream_seed(seed, 2) if seed is not None else rng
    )
    adaptive.offset = offset_cal.threshold

    model = PosteriorModel(mechanism, population, sigma, rng_seed=rng)
    attackers = {
        "mirror": MirrorAttacker(model, rng, expected=True),
        "optimal": OptimalLrtAttacker(mechanism, population, alpha, rng),
        "adaptive": adaptive,
        "naive": FixedThresholdAttacker(population, naive_cal.threshold, beacon_size),
    }
    losses = compare_attackers(mechanism, population, attackers, q, n_samples, rng)
    checks = {
        "mirror>=optimal": _ordered(losses["mirror"], losses["optimal"], n_se),
        "optimal>=adaptive": _ordered(losses["optimal"], losses["adaptive"], n_se),
        "adaptive>=naive": _ordered(losses["adaptive"], losses["naive"], n_se),
    }
    report = OrderingReport(
        losses=losses,
        checks=checks,
        calibration={"naive": naive_cal.to_dict(), "adaptive_offset": offset_cal.to_dict(), "adaptive_n": n},
        n_se=n_se,
    )
    status = "✅" if report.holds else "⚠️"
    logger.info(
        f"{status} Ordering Z={losses['mirror'].loss.value:.4f} opt={losses['optimal'].loss.value:.4f} "
        f"adaptive={losses['adaptive'].loss.value:.4f} naive={losses['naive'].loss.value:.4f}"
    )
    return report


class _BandMixingAttacker:
    """A near-best response: randomizes every claim whose μ_k lies within `band` of γ.

    Each strategy draws its own per-individual claim probabilities, so in-band
    individuals are claimed at different rates across strategies; everyone
    outside the band follows the threshold rule.
    """

    def __init__(self, model: PosteriorModel, gamma: float, claim_probs: np.ndarray, rng, band: float):
        self.model = model
        self.gamma = gamma
        self.claim_probs = claim_probs
        self.rng = rng
        self.band = band
        self.name = "band-mixing"

    def decide(self, releases: np.ndarray, oracle_b: Optional[np.ndarray] = None) -> AttackDecision:
        mu = self.model.marginals(releases)
        claims = mu > self.gamma
        in_band = np.abs(mu - self.gamma) <= self.band
        claims[in_band] = (self.rng.random(mu.shape) < self.claim_probs)[in_band]
        return AttackDecision(mu, claims)


def mirror_dominance_report(
    mechanism: ReleaseMechanism,
    population: Population,
    sigma: MembershipPrior,
    q: MembershipPrior,
    gamma: float,
    n_samples: int = 20000,
    n_strategies: int = 100,
    rng_seed: SeedLike = None,
    band: float = 0.05,
    n_se: float = 3.0,
) -> dict:
    """Z against the threshold best response and randomized near-best responses; flags only."""
    if band <= 0.0:
        raise PosteriorError("mixing band must be positive", {"band": band})
    rng = as_generator(rng_seed)
    model = PosteriorModel(mechanism, population, sigma, rng_seed=rng)
    k = population.num_individuals
    attackers = {
        "mirror": MirrorAttacker(model, rng, expected=True),
        "threshold": BayesThresholdAttacker(model, gamma),
    }
    for i in range(n_strategies):
        attackers[f"sampled_{i}"] = _BandMixingAttacker(model, gamma, rng.random(k), rng, band)
    losses = compare_attackers(mechanism, population, attackers, q, n_samples, rng)
    z = losses.pop("mirror")
    threshold = losses.pop("threshold")
    sampled_ok = [_ordered(z, loss, n_se) for loss in losses.values()]
    sampled_values = [l.loss.value for l in losses.values()]
    return {
        "mirror": z.to_dict(),
        "threshold": threshold.to_dict(),
        "sampled_min_loss": min(sampled_values, default=float("nan")),
        "sampled_max_loss": max(sampled_values, default=float("nan")),
        "sampled_distinct": sum(v != threshold.loss.value for v in sampled_values),
        "mirror>=threshold": _ordered(z, threshold, n_se),
        "mirror>=sampled": all(sampled_ok),
        "n_strategies": n_strategies,
        "band": band,
    }


def aligned_prior_check(
    mechanism: ReleaseMechanism,
    population: Population,
    sigma: MembershipPrior,
    q: MembershipPrior,
    gamma: float,
    n_samples: int = 20000,
    rng_seed: SeedLike = None,
    n_se: float = 3.0,
) -> dict:
    """σ is aligned if uniform, or informative: L(g_D, h^σ) <= L(g_D, h^q) within slack."""
    rng = as_generator(rng_seed)
    attackers = {
        "sigma": BayesThresholdAttacker(PosteriorModel(mechanism, population, sigma, rng_seed=rng), gamma),
        "q": BayesThresholdAttacker(PosteriorModel(mechanism, population, q, rng_seed=rng), gamma),
    }
    losses = compare_attackers(mechanism, population, attackers, q, n_samples, rng)
    informative = _ordered(losses["q"], losses["sigma"], n_se)
    uniform = sigma.kind == PriorKind.uniform
    return {
        "loss_sigma": losses["sigma"].to_dict(),
        "loss_q": losses["q"].to_dict(),
        "informative": informative,
        "uniform": uniform,
        "aligned": informative or uniform,
    }
