"""
services/analysis.py - Gaussian trade-off calculus and the privacy criteria built on it

Trade-off functions are those of the canonical pair N(0, 1) vs N(mu, 1):
β(α) = Φ(Φ^{-1}(1 − α) − mu). z_a denotes the upper a-quantile Φ^{-1}(1 − a).
"""

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy.optimize import brentq
from scipy.stats import norm

from models.decision import TradeoffPoint
from models.mechanism import MechanismKind, ReleaseMechanism
from models.population import MembershipPrior, MembershipVector, Population
from services.bayes import MirrorAttacker, PosteriorModel, compare_attackers
from services.lrt import OptimalLrtAttacker, adjacent_effective_mu
from services.mechanisms import sample_releases
from utils.estimates import Estimate, combined_se
from utils.exceptions import AnalysisError, MechanismError
from utils.io import write_csv
from utils.rng import SeedLike, as_generator

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GaussianPair:
    mu: float

    def __post_init__(self):
        if not self.mu >= 0:
            raise AnalysisError("mu must be nonnegative", {"mu": self.mu})

    def tradeoff(self, alpha):
        return gaussian_tradeoff(self.mu, alpha)

    def power(self, alpha):
        return 1.0 - gaussian_tradeoff(self.mu, alpha)


def _check_unit(name: str, value, closed: bool = True) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    ok = (arr >= 0) & (arr <= 1) if closed else (arr > 0) & (arr < 1)
    if not np.all(ok):
        interval = "[0, 1]" if closed else "(0, 1)"
        raise AnalysisError(f"{name} must lie in {interval}", {name: arr.tolist()})
    return arr


def gaussian_tradeoff(mu, alpha):
    """β = Φ(Φ^{-1}(1 − α) − mu); vectorized over mu and alpha."""
    alpha = _check_unit("alpha", alpha)
    mu = np.asarray(mu, dtype=float)
    if np.any(mu < 0):
        raise AnalysisError("mu must be nonnegative")
    beta = norm.cdf(norm.isf(alpha) - mu)
    return float(beta) if np.ndim(beta) == 0 else beta


def compose_effective_mu(per_snv_shifts, variance_vector) -> float:
    """M_eq = sqrt(Σ_j shift_j² / V_j), the Mahalanobis distance of the composed pair."""
    shifts = np.atleast_1d(np.asarray(per_snv_shifts, dtype=float))
    variances = np.broadcast_to(np.asarray(variance_vector, dtype=float), shifts.shape)
    if np.any(~(variances > 0)):
        raise AnalysisError("variances must be positive")
    return float(np.sqrt(np.sum(shifts ** 2 / variances)))


def composed_gdp_mu(m_hat_vector) -> float:
    m_hat = np.atleast_1d(np.asarray(m_hat_vector, dtype=float))
    if m_hat.size == 0 or np.any(~(m_hat > 0)):
        raise AnalysisError("every M̂_j must be positive")
    return float(np.sqrt(np.sum(m_hat ** 2)))


# ── the F diagnostic ───────────────────────────────────────────

def _z_sum(alpha: float, beta: float) -> float:
    _check_unit("alpha", alpha, closed=False)
    _check_unit("beta", beta, closed=False)
    return float(norm.isf(alpha) + norm.isf(beta))


def lemma1_F(alpha: float, beta: float, m_hat_vector) -> float:
    """F(α, β) = (z_α + z_β)² V̄ / (4 M̄²) with M̄ = ½ Σ M̂_j², V̄ = Σ M̂_j²."""
    m_hat = np.atleast_1d(np.asarray(m_hat_vector, dtype=float))
    composed_gdp_mu(m_hat)
    s = _z_sum(alpha, beta)
    m_bar = 0.5 * np.sum(m_hat ** 2)
    v_bar = np.sum(m_hat ** 2)
    return float(s ** 2 * v_bar / (4.0 * m_bar ** 2))


def lemma1_F_composed(alpha: float, beta: float, m_hat_vector, m: Optional[int] = None) -> float:
    """Composition variant m · (z_α + z_β)|z_α + z_β| / M_eq² with M_eq = sqrt(Σ M̂_j²).

    Equals m exactly on the composed curve β = gaussian_tradeoff(M_eq, α), and
    is >= m iff β lies on or below it.
    """
    m_hat = np.atleast_1d(np.asarray(m_hat_vector, dtype=float))
    m = m_hat.size if m is None else m
    m_eq = composed_gdp_mu(m_hat)
    s = _z_sum(alpha, beta)
    return float(m * s * abs(s) / m_eq ** 2)


def theorem2_condition(alpha: float, mu_0_given_1: float, m: int, m_hat_vector) -> bool:
    """F(α, μ_{0|1}) >= m, evaluated with the verbatim F."""
    return lemma1_F(alpha, mu_0_given_1, m_hat_vector) >= m * (1.0 - 1e-12)


def theorem2_report(alpha: float, mu_0_given_1: float, m: int, m_hat_vector) -> dict:
    f_verbatim = lemma1_F(alpha, mu_0_given_1, m_hat_vector)
    f_composed = lemma1_F_composed(alpha, mu_0_given_1, m_hat_vector, m)
    return {
        "alpha": float(alpha),
        "mu_0_given_1": float(mu_0_given_1),
        "m": int(m),
        "F": f_verbatim,
        "F_composed": f_composed,
        "condition": f_verbatim >= m * (1.0 - 1e-12),
        "condition_composed": f_composed >= m * (1.0 - 1e-12),
    }


# ── GDP and (ε, δ) ─────────────────────────────────────────────

def gdp_to_dp(mu: float, epsilon):
    """δ(ε) = Φ(−ε/μ + μ/2) − e^ε Φ(−ε/μ − μ/2) of a μ-GDP mechanism."""
    if not mu > 0:
        raise AnalysisError("mu must be positive", {"mu": mu})
    epsilon = np.asarray(epsilon, dtype=float)
    if np.any(epsilon < 0):
        raise AnalysisError("epsilon must be nonnegative")
    delta = norm.cdf(-epsilon / mu + mu / 2.0) - np.exp(epsilon) * norm.cdf(-epsilon / mu - mu / 2.0)
    delta = np.maximum(delta, 0.0)
    return float(delta) if np.ndim(delta) == 0 else delta


def dp_to_gdp(epsilon: float, delta: float, mu_max: float = 100.0) -> float:
    """Smallest μ whose GDP guarantee implies (ε, δ)-DP; Brent root of δ(ε; μ) = δ."""
    if epsilon < 0:
        raise AnalysisError("epsilon must be nonnegative", {"epsilon": epsilon})
    if not 0.0 < delta < 1.0:
        raise AnalysisError("delta must lie in (0, 1)", {"delta": delta})
    lo = 1e-8
    if gdp_to_dp(lo, epsilon) > delta or gdp_to_dp(mu_max, epsilon) < delta:
        raise AnalysisError("no μ in the search bracket matches this (ε, δ)", {"epsilon": epsilon, "delta": delta})
    return float(brentq(lambda mu: gdp_to_dp(mu, epsilon) - delta, lo, mu_max, xtol=1e-12))


# ── curves and Monte Carlo oracles ─────────────────────────────

def tradeoff_curve(mu: float, n_points: int = 101) -> List[TradeoffPoint]:
    alphas = np.linspace(0.0, 1.0, n_points)
    betas = np.atleast_1d(gaussian_tradeoff(mu, alphas))
    return [TradeoffPoint(float(a), float(min(max(b, 0.0), 1.0))) for a, b in zip(alphas, betas)]


def write_tradeoff_csv(points: Sequence[TradeoffPoint], path: Union[str, Path]) -> Path:
    return write_csv(path, ["alpha", "beta"], ((p.alpha, p.beta) for p in points))


def monte_carlo_tradeoff(mu: float, alpha: float, n_samples: int = 100000, rng_seed: SeedLike = None) -> Estimate:
    """β of the UMP test of N(0,1) vs N(mu,1), with the threshold set from null draws."""
    rng = as_generator(rng_seed)
    null = rng.standard_normal(n_samples)
    threshold = np.quantile(null, 1.0 - alpha)
    alt = mu + rng.standard_normal(n_samples)
    return Estimate.from_draws(alt < threshold)


def monte_carlo_composed_power(
    shifts, variances, alpha: float, n_samples: int = 100000, rng_seed: SeedLike = None
) -> Estimate:
    """Power of the exact LRT between N(0, diag V) and N(shift, diag V), both arms simulated."""
    rng = as_generator(rng_seed)
    shifts = np.atleast_1d(np.asarray(shifts, dtype=float))
    sd = np.sqrt(np.broadcast_to(np.asarray(variances, dtype=float), shifts.shape))
    direction = shifts / sd ** 2

    null = (sd * rng.standard_normal((n_samples, shifts.size))) @ direction
    alt = (shifts + sd * rng.standard_normal((n_samples, shifts.size))) @ direction
    threshold = np.quantile(null, 1.0 - alpha)
    return Estimate.from_draws(alt > threshold)


def tabulate_lemma1(
    alpha: float = 0.05,
    ms: Sequence[int] = (1, 2, 4, 8, 16),
    m_hat: float = 1.0,
    n_samples: int = 100000,
    rng_seed: SeedLike = None,
) -> List[dict]:
    """Per m: Monte Carlo UMP β̂ on m coordinates with M̂_j ≡ m_hat, and both F values at (α, β̂)."""
    rng = as_generator(rng_seed)
    rows = []
    for m in ms:
        power = monte_carlo_composed_power(np.full(m, m_hat), 1.0, alpha, n_samples, rng)
        beta = 1.0 - power.value
        m_hats = np.full(m, m_hat)
        in_range = 0.0 < beta < 1.0
        rows.append({
            "m": int(m),
            "beta": beta,
            "se": power.se,
            "beta_closed_form": gaussian_tradeoff(composed_gdp_mu(m_hats), alpha),
            "F": lemma1_F(alpha, beta, m_hats) if in_range else float("nan"),
            "F_composed": lemma1_F_composed(alpha, beta, m_hats) if in_range else float("nan"),
        })
    return rows


# ── posterior-based criteria ───────────────────────────────────

def _conditioning_draws(conditioning, n: int, rng: np.random.Generator) -> np.ndarray:
    if isinstance(conditioning, MembershipVector):
        return np.tile(conditioning.bits, (n, 1))
    if isinstance(conditioning, MembershipPrior):
        return conditioning.sample(rng, n)
    return np.tile(np.asarray(conditioning).astype(bool), (n, 1))


def _require_gaussian(mechanism: ReleaseMechanism) -> None:
    if mechanism.kind == MechanismKind.generator:
        raise MechanismError("generator-backed mechanisms have no density for posterior criteria")


@dataclass(frozen=True)
class MissProbability:
    value: float
    se: float
    samples: int
    argmax_k: int
    per_individual: List[float]

    def to_dict(self) -> dict:
        return asdict(self)


def mu_0_given_1(
    mechanism: ReleaseMechanism,
    population: Population,
    sigma: MembershipPrior,
    conditioning,
    n_samples: int = 5000,
    rng_seed: SeedLike = None,
) -> MissProbability:
    """max_k E[1 − μ_σ(b_k = 1 | y)] with y ~ ρ_D(· | b_k = 1, b_{−k}).

    `conditioning` fixes b_{−k}: a MembershipVector (or bit array) held
    fixed, or a prior from which b_{−k} is drawn.
    """
    _require_gaussian(mechanism)
    rng = as_generator(rng_seed)
    model = PosteriorModel(mechanism, population, sigma, rng_seed=rng)
    per_k = []
    for k in range(population.num_individuals):
        memberships = _conditioning_draws(conditioning, n_samples, rng)
        memberships[:, k] = True
        releases, _, _ = sample_releases(mechanism, population, memberships, rng)
        per_k.append(Estimate.from_draws(1.0 - model.marginals(releases)[:, k]))
    best = int(np.argmax([e.value for e in per_k]))
    result = MissProbability(
        value=per_k[best].value,
        se=per_k[best].se,
        samples=per_k[best].samples,
        argmax_k=best,
        per_individual=[e.value for e in per_k],
    )
    logger.debug(f"μ_0|1 = {result.value:.4f} ± {result.se:.4f} (k={best})")
    return result


@dataclass(frozen=True)
class DeltaCriterion:
    """Δ(α, σ, q) = μ_{0|1}(σ, q) − β(α, q) from paired draws."""

    delta: float
    se: float
    beta: float
    mu_0_given_1: float
    samples: int

    @property
    def favours_bayesian(self) -> bool:
        return self.delta >= 0.0

    def to_dict(self) -> dict:
        return {**asdict(self), "favours_bayesian": self.favours_bayesian}


def delta_criterion(
    mechanism: ReleaseMechanism,
    population: Population,
    sigma: MembershipPrior,
    q: MembershipPrior,
    alpha: float,
    n_samples: int = 10000,
    rng_seed: SeedLike = None,
    target_k: Optional[int] = None,
) -> DeltaCriterion:
    """Monte Carlo Δ over b ~ q with b_k forced to 1.

    β(α, q) averages gaussian_tradeoff(M_eq[b^[k]_0, b^[k]_1], α); μ_{0|1}
    averages the posterior miss 1 − μ_σ(b_k = 1 | y) on the same draws. With
    no target_k, k is drawn uniformly per sample.
    """
    if mechanism.kind != MechanismKind.gaussian:
        raise MechanismError("Δ(α, σ, q) is defined for Gaussian mechanisms")
    _check_unit("alpha", alpha)
    rng = as_generator(rng_seed)
    model = PosteriorModel(mechanism, population, sigma, rng_seed=rng)
    k_count = population.num_individuals
    ks = np.full(n_samples, target_k) if target_k is not None else rng.integers(0, k_count, n_samples)
    memberships = q.sample(rng, n_samples)
    memberships[np.arange(n_samples), ks] = True

    m_eq = adjacent_effective_mu(mechanism, population, memberships)[np.arange(n_samples), ks]
    beta_draws = np.where(np.isinf(m_eq), 0.0, gaussian_tradeoff(np.where(np.isinf(m_eq), 0.0, m_eq), alpha))
    releases, _, _ = sample_releases(mechanism.with_clip(False), population, memberships, rng)
    miss_draws = 1.0 - model.marginals(releases)[np.arange(n_samples), ks]

    diff = Estimate.from_draws(miss_draws - beta_draws)
    result = DeltaCriterion(
        delta=diff.value,
        se=diff.se,
        beta=float(beta_draws.mean()),
        mu_0_given_1=float(miss_draws.mean()),
        samples=n_samples,
    )
    logger.debug(f"Δ(α={alpha}) = {result.delta:.4f} ± {result.se:.4f}")
    return result


@dataclass(frozen=True)
class Theorem2Check:
    """One instance: the F(α, μ_{0|1}) >= m condition next to L_opt(α) and L^σ on common draws."""

    condition: dict
    miss: MissProbability
    loss_optimal: Estimate
    loss_mirror: Estimate
    n_se: float

    @property
    def holds(self) -> bool:
        """Vacuous when the condition fails; otherwise L_opt <= L^σ + n_se · SE."""
        if not self.condition["condition"]:
            return True
        slack = self.n_se * combined_se(self.loss_optimal, self.loss_mirror)
        return self.loss_optimal.value <= self.loss_mirror.value + slack

    def to_dict(self) -> dict:
        return {
            "condition": dict(self.condition),
            "mu_0_given_1": self.miss.to_dict(),
            "loss_optimal": self.loss_optimal.to_dict(),
            "loss_mirror": self.loss_mirror.to_dict(),
            "holds": self.holds,
            "n_se": self.n_se,
        }


def theorem2_check(
    mechanism: ReleaseMechanism,
    population: Population,
    sigma: MembershipPrior,
    q: MembershipPrior,
    alpha: float,
    m_hat_vector,
    n_samples: int = 20000,
    miss_samples: int = 2000,
    rng_seed: SeedLike = None,
    n_se: float = 3.0,
) -> Theorem2Check:
    """Evaluate the sufficient condition at μ_{0|1}(σ, q) and compare it with Monte Carlo losses."""
    if mechanism.kind != MechanismKind.gaussian:
        raise MechanismError("the condition is stated for Gaussian mechanisms")
    _check_unit("alpha", alpha, closed=False)
    rng = as_generator(rng_seed)
    miss = mu_0_given_1(mechanism, population, sigma, q, miss_samples, rng)
    m = population.num_snvs
    if 0.0 < miss.value < 1.0:
        condition = theorem2_report(alpha, miss.value, m, m_hat_vector)
    else:
        condition = {"alpha": float(alpha), "mu_0_given_1": miss.value, "m": m, "condition": False}

    model = PosteriorModel(mechanism, population, sigma, rng_seed=rng)
    attackers = {
        "optimal": OptimalLrtAttacker(mechanism, population, alpha, rng),
        "mirror": MirrorAttacker(model, rng, expected=True),
    }
    losses = compare_attackers(mechanism, population, attackers, q, n_samples, rng)
    result = Theorem2Check(
        condition=condition,
        miss=miss,
        loss_optimal=losses["optimal"].loss,
        loss_mirror=losses["mirror"].loss,
        n_se=n_se,
    )
    status = "✅" if result.holds else "⚠️"
    logger.info(
        f"{status} F-condition={condition['condition']} μ_0|1={miss.value:.4f} "
        f"L_opt={result.loss_optimal.value:.4f} L^σ={result.loss_mirror.value:.4f}"
    )
    return result
