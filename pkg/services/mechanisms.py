"""
services/mechanisms.py - Defense mechanisms: sampling, exact densities, utility loss

Densities are always the pre-clip densities of r = x(b) + δ. A clipped
mechanism can be sampled but has no density here (clipping puts atoms at 0
and 1).
"""

import logging
from typing import Optional

import numpy as np

from models.mechanism import MeanMap, MechanismKind, Release, ReleaseMechanism
from models.population import MembershipPrior, MembershipVector, Population
from services.population import summary_stats_batch
from utils.estimates import Estimate
from utils.exceptions import MechanismError
from utils.rng import SeedLike, as_generator

logger = logging.getLogger(__name__)

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)
# Chunk size (draws x support) for broadcasting density evaluation
_DENSITY_CHUNK = 2_000_000


# ── constructors ───────────────────────────────────────────────

def zero_noise_mechanism(clip: bool = False) -> ReleaseMechanism:
    return ReleaseMechanism(MechanismKind.zero, clip=clip, label="zero-noise")


def laplace_mechanism(epsilon: float, sensitivity: float, clip: bool = False) -> ReleaseMechanism:
    """ε-DP Laplace noise with scale sens / ε; E|δ_j| equals the scale."""
    if not epsilon > 0:
        raise MechanismError("epsilon must be positive", {"epsilon": epsilon})
    if not sensitivity > 0:
        raise MechanismError("sensitivity must be positive", {"sensitivity": sensitivity})
    scale = float(sensitivity) / float(epsilon)
    return ReleaseMechanism(
        MechanismKind.laplace,
        clip=clip,
        scale=scale,
        label=f"laplace(eps={epsilon:g})",
        params={"epsilon": float(epsilon), "sensitivity": float(sensitivity)},
    )


def gaussian_mechanism(
    variances,
    mean_map: Optional[MeanMap] = None,
    clip: bool = False,
    label: str = "",
    params: Optional[dict] = None,
) -> ReleaseMechanism:
    return ReleaseMechanism(
        MechanismKind.gaussian,
        clip=clip,
        variances=np.atleast_1d(np.asarray(variances, dtype=float)),
        mean_map=mean_map or MeanMap.zero(),
        label=label or "gaussian",
        params=params or {},
    )


def validate_adjacency(
    mean_map: MeanMap,
    population: Population,
    bound: float,
    n_pairs: int = 256,
    rng_seed: SeedLike = None,
) -> float:
    """Largest |M_b^j - M_b'^j| over sampled adjacent pairs; raises if above bound."""
    if mean_map.kind.value == "zero":
        return 0.0
    rng = as_generator(rng_seed)
    k = population.num_individuals
    if k < 2:
        return 0.0
    prior = MembershipPrior.uniform(k)
    b = prior.sample(rng, n_pairs)
    flip = rng.integers(0, k, size=n_pairs)
    b_adj = b.copy()
    b_adj[np.arange(n_pairs), flip] ^= True
    keep = b_adj.any(axis=1)
    b, b_adj = b[keep], b_adj[keep]
    x, x_adj = summary_stats_batch(population, b), summary_stats_batch(population, b_adj)
    gap = float(np.max(np.abs(mean_map.evaluate(x, b) - mean_map.evaluate(x_adj, b_adj)), initial=0.0))
    if gap > bound * (1.0 + 1e-12):
        raise MechanismError(
            "mean map violates the adjacency bound",
            {"max_gap": gap, "bound": float(bound)},
        )
    return gap


def gaussian_mechanism_theorem2(
    m_hat,
    num_snvs: int,
    k_min: int,
    mean_map: Optional[MeanMap] = None,
    population: Optional[Population] = None,
    n_pairs: int = 256,
    rng_seed: SeedLike = None,
) -> ReleaseMechanism:
    """Gaussian mechanism with V^j = (m / (K† M̂_j))^2.

    Each coordinate is then M̂_j-GDP provided adjacent means differ by at
    most m / K†; that bound is checked on sampled adjacent pairs when a
    population is supplied.
    """
    m_hat = np.broadcast_to(np.asarray(m_hat, dtype=float), (num_snvs,)).copy()
    if np.any(~(m_hat > 0)):
        raise MechanismError("every M̂_j must be positive")
    if k_min < 1:
        raise MechanismError("k_min must be at least 1", {"k_min": k_min})
    mean_map = mean_map or MeanMap.zero()
    if population is not None:
        validate_adjacency(mean_map, population, num_snvs / k_min, n_pairs, rng_seed)
    variances = (num_snvs / (k_min * m_hat)) ** 2
    return gaussian_mechanism(
        variances,
        mean_map,
        label="gaussian-gdp",
        params={"k_min": int(k_min), "m_hat": m_hat.tolist()},
    )


# ── sampling ───────────────────────────────────────────────────

def release_means(mechanism: ReleaseMechanism, population: Population, memberships: np.ndarray) -> np.ndarray:
    """Pre-clip mean of r for each membership row: x(b) + M_b (x(b) alone for centered noise)."""
    memberships = np.atleast_2d(memberships)
    stats = summary_stats_batch(population, memberships)
    if mechanism.kind == MechanismKind.gaussian:
        return stats + mechanism.mean_map.evaluate(stats, memberships)
    return stats


def sample_noise_batch(
    mechanism: ReleaseMechanism,
    memberships: np.ndarray,
    stats: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    n, m = stats.shape
    if mechanism.kind == MechanismKind.zero:
        return np.zeros((n, m))
    if mechanism.kind == MechanismKind.laplace:
        return rng.laplace(0.0, mechanism.scale, size=(n, m))
    if mechanism.kind == MechanismKind.gaussian:
        means = mechanism.mean_map.evaluate(stats, memberships)
        return means + np.sqrt(mechanism.variances) * rng.standard_normal((n, m))
    return np.asarray(mechanism.generator.sample_noise(memberships, rng), dtype=float)


def sample_releases(
    mechanism: ReleaseMechanism,
    population: Population,
    memberships: np.ndarray,
    rng_seed: SeedLike = None,
):
    """Batch sampler: returns (released values, noise, summary stats), each (n, m)."""
    rng = as_generator(rng_seed)
    memberships = np.atleast_2d(np.asarray(memberships).astype(bool))
    stats = summary_stats_batch(population, memberships)
    noise = sample_noise_batch(mechanism, memberships, stats, rng)
    values = stats + noise
    if mechanism.clip:
        values = np.clip(values, 0.0, 1.0)
    return values, noise, stats


def sample_release(mechanism: ReleaseMechanism, population: Population, b, rng_seed: SeedLike = None) -> Release:
    bits = b.bits if isinstance(b, MembershipVector) else np.asarray(b).astype(bool)
    values, noise, _ = sample_releases(mechanism, population, bits[None, :], rng_seed)
    return Release(values[0], noise[0])


# ── densities ──────────────────────────────────────────────────

def _require_density(mechanism: ReleaseMechanism) -> None:
    if mechanism.kind == MechanismKind.generator:
        raise MechanismError("generator-backed mechanisms have no closed-form density")
    if mechanism.clip:
        raise MechanismError("densities are only defined for un-clipped releases")


def log_likelihood_matrix(
    mechanism: ReleaseMechanism,
    population: Population,
    support: np.ndarray,
    releases: np.ndarray,
    support_means: Optional[np.ndarray] = None,
) -> np.ndarray:
    """log ρ_D(r_i | b_s) for every release row i and support row s, shape (n, S)."""
    _require_density(mechanism)
    releases = np.atleast_2d(np.asarray(releases, dtype=float))
    means = support_means if support_means is not None else release_means(mechanism, population, support)

    if mechanism.kind == MechanismKind.gaussian:
        variances = np.broadcast_to(mechanism.variances, (releases.shape[1],))
        inv_v = 1.0 / variances
        const = -0.5 * np.sum(np.log(variances)) - releases.shape[1] * _LOG_SQRT_2PI
        quad = (
            (releases ** 2) @ inv_v
        )[:, None] - 2.0 * releases @ (means * inv_v).T + ((means ** 2) @ inv_v)[None, :]
        return const - 0.5 * quad

    if mechanism.kind == MechanismKind.zero:
        hit = np.all(np.isclose(releases[:, None, :], means[None, :, :], rtol=0.0, atol=1e-12), axis=2)
        return np.where(hit, 0.0, -np.inf)

    # Laplace: broadcast in chunks over the release rows
    scale = mechanism.scale
    n, m = releases.shape
    out = np.empty((n, means.shape[0]))
    step = max(1, _DENSITY_CHUNK // max(1, means.shape[0] * m))
    const = -m * np.log(2.0 * scale)
    for start in range(0, n, step):
        block = releases[start:start + step]
        out[start:start + step] = const - np.abs(block[:, None, :] - means[None, :, :]).sum(axis=2) / scale
    return out


def log_density(mechanism: ReleaseMechanism, population: Population, b, release) -> float:
    """Exact log ρ_D(r | b) for a single release (pre-clip)."""
    bits = b.bits if isinstance(b, MembershipVector) else np.asarray(b).astype(bool)
    values = release.values if isinstance(release, Release) else np.asarray(release, dtype=float)
    return float(log_likelihood_matrix(mechanism, population, bits[None, :], values[None, :])[0, 0])


# ── utility ────────────────────────────────────────────────────

def expected_utility_loss(
    mechanism: ReleaseMechanism,
    population: Population,
    prior: MembershipPrior,
    kappa_vector,
    n_samples: int = 10000,
    rng_seed: SeedLike = None,
    batch_size: int = 2048,
) -> Estimate:
    """Monte Carlo E[Σ_j κ_j |δ_j|] with b ~ prior, δ ~ g_D(· | b); δ is pre-clip."""
    kappa = np.broadcast_to(np.asarray(kappa_vector, dtype=float), (population.num_snvs,))
    if np.any(kappa < 0):
        raise MechanismError("utility weights must be nonnegative")
    rng = as_generator(rng_seed)
    if mechanism.kind == MechanismKind.zero or not np.any(kappa > 0):
        return Estimate(0.0, 0.0, int(n_samples))

    draws = []
    remaining = int(n_samples)
    while remaining > 0:
        n = min(batch_size, remaining)
        memberships = prior.sample(rng, n)
        stats = summary_stats_batch(population, memberships)
        noise = sample_noise_batch(mechanism, memberships, stats, rng)
        draws.append(np.abs(noise) @ kappa)
        remaining -= n
    estimate = Estimate.from_draws(np.concatenate(draws))
    logger.debug(f"Utility loss of {mechanism.label}: {estimate.value:.5g} ± {estimate.se:.2g}")
    return estimate
