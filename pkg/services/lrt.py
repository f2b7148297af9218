"""
services/lrt.py - Likelihood-ratio membership attacks on beacon statistics

Convention used throughout: the attacker claims membership of k iff
ℓ(d_k, r) <= τ (ties claim). α is the false-positive rate on true
non-members and power is the true-positive rate on true members.
Confidences are oriented so that larger means "more likely a member".
"""

import logging
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np
from scipy.stats import norm

from models.decision import AttackDecision
from models.mechanism import MechanismKind, ReleaseMechanism
from models.population import MembershipPrior, MembershipVector, Population
from services.mechanisms import log_likelihood_matrix, release_means, sample_releases
from utils.exceptions import CalibrationError, MechanismError
from utils.rng import SeedLike, as_generator

logger = logging.getLogger(__name__)

MIN_CALIBRATION_SAMPLES = 1000
DEFAULT_ADAPTIVE_FRACTION = 0.05
DEFAULT_BEACON_RATE = 0.5


@dataclass(frozen=True)
class LrtConfig:
    alpha: float = 0.05
    threshold: Optional[float] = None
    adaptive_n: Optional[int] = None
    calibration_samples: int = 100000

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise CalibrationError("alpha must lie in (0, 1)", {"alpha": self.alpha})
        if self.adaptive_n is not None and self.adaptive_n < 1:
            raise CalibrationError("adaptive N must be positive", {"adaptive_n": self.adaptive_n})
        if self.calibration_samples < 1:
            raise CalibrationError("calibration_samples must be positive")

    def with_threshold(self, threshold: float) -> "LrtConfig":
        return replace(self, threshold=float(threshold))


@dataclass(frozen=True)
class ThresholdCalibration:
    """Outcome of a Monte Carlo calibration; `threshold` is the calibrated τ."""

    threshold: float
    alpha: float
    samples: int
    achieved_fpr: float
    threshold_se: float

    def to_dict(self) -> dict:
        return asdict(self)


# ── the statistic ──────────────────────────────────────────────

def clamp_floor(beacon_size) -> np.ndarray:
    """Half-count smoothing bound 1 / (2|B|)."""
    return 1.0 / (2.0 * np.maximum(np.asarray(beacon_size, dtype=float), 1.0))


def clamp_release(values, beacon_size):
    """Clamp released frequencies into [x_min, 1 - x_min]; returns (clamped, count)."""
    values = np.asarray(values, dtype=float)
    floor = clamp_floor(beacon_size)
    if floor.ndim == 1 and values.ndim == 2:
        floor = floor[:, None]
    clamped = np.clip(values, floor, 1.0 - floor)
    return clamped, int(np.count_nonzero(clamped != values))


def lrs_matrix(genotypes: np.ndarray, reference_aafs: np.ndarray, released, beacon_size):
    """Eq. 1 for every genotype row against one release (m,) or a batch (n, m).

    Returns (statistics, clamp count) with statistics shaped (K,) or (n, K).
    """
    released = np.asarray(released, dtype=float)
    single = released.ndim == 1
    clamped, n_clamped = clamp_release(np.atleast_2d(released), beacon_size)
    p = np.asarray(reference_aafs, dtype=float)
    d = np.asarray(genotypes, dtype=float)
    carry = np.log(p) - np.log(clamped)
    absent = np.log1p(-p) - np.log1p(-clamped)
    values = carry @ d.T + absent @ (1.0 - d).T
    return (values[0] if single else values), n_clamped


def lrs(genotype_row, reference_aafs, released_stats, beacon_size: int) -> float:
    values, n_clamped = lrs_matrix(np.atleast_2d(genotype_row), reference_aafs, released_stats, beacon_size)
    if n_clamped:
        logger.debug(f"LRS: clamped {n_clamped} released frequencies")
    return float(values[0])


def expected_beacon_size(prior: MembershipPrior) -> int:
    return max(1, int(round(float(prior.member_rates.sum()))))


def _resolve_beacon_size(population: Population, prior: Optional[MembershipPrior], beacon_size: Optional[int]) -> int:
    """Known |B| if given, else the expected size under the prior (Bernoulli(0.5) when absent)."""
    if beacon_size is not None:
        if beacon_size < 1:
            raise CalibrationError("beacon size must be at least 1", {"beacon_size": beacon_size})
        return int(beacon_size)
    prior = prior or MembershipPrior.bernoulli(population.num_individuals, DEFAULT_BEACON_RATE)
    return expected_beacon_size(prior)


# ── fixed threshold ────────────────────────────────────────────

class FixedThresholdAttacker:
    """Naive attacker: one threshold τ° for every release."""

    name = "fixed-lrt"

    def __init__(self, population: Population, threshold: float, beacon_size: int):
        self.population = population
        self.threshold = float(threshold)
        self.beacon_size = beacon_size

    def decide(self, releases: np.ndarray, oracle_b: Optional[np.ndarray] = None) -> AttackDecision:
        stats, _ = lrs_matrix(self.population.genotypes, self.population.reference_aafs, releases, self.beacon_size)
        return AttackDecision(confidences=-stats, claims=stats <= self.threshold)


def fixed_threshold_attack(
    population: Population,
    released_stats,
    config: LrtConfig,
    beacon_size: Optional[int] = None,
    prior: Optional[MembershipPrior] = None,
) -> AttackDecision:
    if config.threshold is None:
        raise CalibrationError("fixed-threshold attack needs a threshold; run calibrate_threshold first")
    beacon_size = _resolve_beacon_size(population, prior, beacon_size)
    return FixedThresholdAttacker(population, config.threshold, beacon_size).decide(released_stats)


def _batch_quantile_se(values: np.ndarray, alpha: float, n_batches: int = 20) -> float:
    if values.size < 2 * n_batches:
        return float("nan")
    batches = np.array_split(values, n_batches)
    qs = np.array([np.quantile(b, alpha, method="inverted_cdf") for b in batches])
    return float(qs.std(ddof=1) / np.sqrt(n_batches))


def _quantile_calibration(values: np.ndarray, alpha: float) -> ThresholdCalibration:
    if values.size == 0 or np.all(values == values[0]):
        raise CalibrationError("degenerate statistic distribution: every simulated value is equal")
    tau = float(np.quantile(values, alpha, method="inverted_cdf"))
    return ThresholdCalibration(
        threshold=tau,
        alpha=float(alpha),
        samples=int(values.size),
        achieved_fpr=float(np.mean(values <= tau)),
        threshold_se=_batch_quantile_se(values, alpha),
    )


def _simulate_nonmember_stats(population, mechanism, prior, n_samples, rng, batch_size, statistic):
    collected, total = [], 0
    while total < n_samples:
        memberships = prior.sample(rng, batch_size)
        values, _, _ = sample_releases(mechanism, population, memberships, rng)
        stats = statistic(values)
        chunk = stats[~memberships]
        collected.append(chunk)
        total += chunk.size
        if not (~memberships).any() and len(collected) > 50:
            raise CalibrationError("the prior never leaves anyone out of the beacon; no non-members to calibrate on")
    # Shuffle before truncation so batch-means SE stays honest
    values = np.concatenate(collected)
    return values[rng.permutation(values.size)[:n_samples]]


def calibrate_threshold(
    population: Population,
    mechanism: ReleaseMechanism,
    prior: MembershipPrior,
    alpha: float,
    n_samples: int = 100000,
    rng_seed: SeedLike = None,
    beacon_size: Optional[int] = None,
    batch_size: int = 256,
) -> ThresholdCalibration:
    """α-quantile of the non-member LRS over simulated beacons, so claiming at τ has FPR ≈ α."""
    if not 0.0 < alpha <= 1.0:
        raise CalibrationError("alpha must lie in (0, 1]", {"alpha": alpha})
    if n_samples < MIN_CALIBRATION_SAMPLES:
        raise CalibrationError(
            f"calibration needs at least {MIN_CALIBRATION_SAMPLES} samples", {"n_samples": n_samples}
        )
    rng = as_generator(rng_seed)
    beacon_size = beacon_size or expected_beacon_size(prior)
    values = _simulate_nonmember_stats(
        population, mechanism, prior, n_samples, rng, batch_size,
        lambda r: lrs_matrix(population.genotypes, population.reference_aafs, r, beacon_size)[0],
    )
    result = _quantile_calibration(values, alpha)
    logger.info(
        f"🎯 Calibrated τ={result.threshold:.4f} at α={alpha} "
        f"(achieved FPR {result.achieved_fpr:.4f} over {result.samples} non-member draws)"
    )
    return result


# ── adaptive threshold ─────────────────────────────────────────

def default_adaptive_n(reference_pool_size: int) -> int:
    return max(1, int(round(DEFAULT_ADAPTIVE_FRACTION * reference_pool_size)))


def adaptive_threshold(reference_lrs_values, n: int) -> float:
    """τ^(N)(r): mean of the N smallest reference LRS values."""
    values = np.asarray(reference_lrs_values, dtype=float)
    return float(_bottom_n_mean(values[None, :], n)[0])


def _bottom_n_mean(values: np.ndarray, n: int) -> np.ndarray:
    if n < 1:
        raise CalibrationError("adaptive N must be at least 1", {"N": n})
    if n > values.shape[-1]:
        raise CalibrationError(
            "adaptive N exceeds the reference pool", {"N": n, "pool": int(values.shape[-1])}
        )
    return np.partition(values, n - 1, axis=-1)[..., :n].mean(axis=-1)


class AdaptiveThresholdAttacker:
    """Claims k iff ℓ(d_k, r) <= τ^(N)(r) + offset, τ^(N) from a disjoint reference pool."""

    name = "adaptive-lrt"

    def __init__(self, population: Population, reference: Population, n: int, beacon_size: int, offset: float = 0.0):
        if reference.num_individuals < 1:
            raise CalibrationError("adaptive attack needs a non-empty reference set")
        self.population = population
        self.reference = reference
        self.n = int(n)
        self.beacon_size = beacon_size
        self.offset = float(offset)

    def thresholds(self, releases: np.ndarray) -> np.ndarray:
        ref_stats, _ = lrs_matrix(
            self.reference.genotypes, self.population.reference_aafs, np.atleast_2d(releases), self.beacon_size
        )
        return _bottom_n_mean(ref_stats, self.n) + self.offset

    def margins(self, releases: np.ndarray) -> np.ndarray:
        """τ^(N)(r) + offset − ℓ(d_k, r) for each release row and target k."""
        releases = np.atleast_2d(releases)
        stats, _ = lrs_matrix(self.population.genotypes, self.population.reference_aafs, releases, self.beacon_size)
        return self.thresholds(releases)[:, None] - stats

    def decide(self, releases: np.ndarray, oracle_b: Optional[np.ndarray] = None) -> AttackDecision:
        single = np.asarray(releases).ndim == 1
        margins = self.margins(releases)
        if single:
            margins = margins[0]
        return AttackDecision(confidences=margins, claims=margins >= 0.0)


def adaptive_attack(
    population: Population,
    released_stats,
    reference_set: Population,
    n: Optional[int] = None,
    beacon_size: Optional[int] = None,
    prior: Optional[MembershipPrior] = None,
) -> AttackDecision:
    n = n or default_adaptive_n(reference_set.num_individuals)
    beacon_size = _resolve_beacon_size(population, prior, beacon_size)
    return AdaptiveThresholdAttacker(population, reference_set, n, beacon_size).decide(released_stats)


def calibrate_adaptive_offset(
    attacker: AdaptiveThresholdAttacker,
    mechanism: ReleaseMechanism,
    prior: MembershipPrior,
    alpha: float,
    n_samples: int = 100000,
    rng_seed: SeedLike = None,
    batch_size: int = 256,
) -> ThresholdCalibration:
    """Additive offset c making the mean significance of ℓ <= τ^(N)(r) + c equal α.

    Pooled over simulated non-members, FPR(c) = P(ℓ − τ^(N) <= c), so the
    exact solution is the α-quantile of ℓ − τ^(N)(r).
    """
    rng = as_generator(rng_seed)
    base = AdaptiveThresholdAttacker(attacker.population, attacker.reference, attacker.n, attacker.beacon_size)
    values = _simulate_nonmember_stats(
        attacker.population, mechanism, prior, n_samples, rng, batch_size,
        lambda r: -base.margins(r),
    )
    result = _quantile_calibration(values, alpha)
    logger.info(f"🎯 Adaptive offset c={result.threshold:.4f} matches mean significance {alpha}")
    return result


# ── Neyman–Pearson optimal test ────────────────────────────────

def optimal_lrt_power(mechanism: ReleaseMechanism, population: Population, b0, b1, alpha: float) -> float:
    """Closed-form power Φ(M_eq − z_α) of the UMP test between two adjacent Gaussian arms."""
    if mechanism.kind != MechanismKind.gaussian:
        raise MechanismError("closed-form power needs a Gaussian mechanism")
    means = release_means(mechanism, population, np.vstack([np.asarray(b0), np.asarray(b1)]).astype(bool))
    variances = np.broadcast_to(mechanism.variances, (population.num_snvs,))
    m_eq = float(np.sqrt(np.sum((means[1] - means[0]) ** 2 / variances)))
    return float(norm.cdf(m_eq - norm.isf(alpha)))


# Rows of (n * K * m) arm means built at once
_ARM_CHUNK = 4_000_000


def adjacent_arm_means(mechanism: ReleaseMechanism, population: Population, memberships: np.ndarray):
    """Pre-clip means of the adjacent arms b^[k]_0, b^[k]_1 for every row and every k.

    Returns (mu0, mu1, empty0) shaped (n, K, m), (n, K, m), (n, K). Where
    b^[k]_0 would be the empty beacon, mu0 repeats mu1 and empty0 is set.
    """
    memberships = np.atleast_2d(np.asarray(memberships).astype(bool))
    n, k = memberships.shape
    b0 = np.repeat(memberships[:, None, :], k, axis=1)
    b1 = b0.copy()
    idx = np.arange(k)
    b0[:, idx, idx], b1[:, idx, idx] = False, True
    empty0 = ~b0.any(axis=2)
    b0[empty0] = b1[empty0]
    m = population.num_snvs
    mu0 = release_means(mechanism, population, b0.reshape(n * k, k)).reshape(n, k, m)
    mu1 = release_means(mechanism, population, b1.reshape(n * k, k)).reshape(n, k, m)
    return mu0, mu1, empty0


def adjacent_effective_mu(mechanism: ReleaseMechanism, population: Population, memberships: np.ndarray) -> np.ndarray:
    """M_eq[b^[k]_0, b^[k]_1] for every row and k, shape (n, K); +inf where b^[k]_0 is empty."""
    if mechanism.kind != MechanismKind.gaussian:
        raise MechanismError("M_eq is defined for Gaussian mechanisms")
    mu0, mu1, empty0 = adjacent_arm_means(mechanism, population, memberships)
    variances = np.broadcast_to(mechanism.variances, (population.num_snvs,))
    m_eq = np.sqrt(np.sum((mu1 - mu0) ** 2 / variances, axis=2))
    m_eq[empty0] = np.inf
    return m_eq


class OptimalLrtAttacker:
    """α-level UMP test of b^[k]_0 against b^[k]_1, conditioning on the true b_{-k}.

    Gaussian mechanisms use the exact standardized likelihood-ratio
    statistic. Other density-supported mechanisms threshold the exact
    log-likelihood ratio at a quantile simulated under the null arm.
    """

    name = "optimal-lrt"

    def __init__(
        self,
        mechanism: ReleaseMechanism,
        population: Population,
        alpha: float,
        rng_seed: SeedLike = None,
        null_samples: int = 2000,
    ):
        if mechanism.kind == MechanismKind.generator:
            raise MechanismError("the optimal LRT needs a mechanism with a density")
        if not 0.0 < alpha < 1.0:
            raise CalibrationError("alpha must lie in (0, 1)", {"alpha": alpha})
        self.mechanism = mechanism.with_clip(False)
        self.population = population
        self.alpha = float(alpha)
        self.z_alpha = float(norm.isf(alpha))
        self.rng = as_generator(rng_seed)
        self.null_samples = int(null_samples)

    def _decide_gaussian(self, releases: np.ndarray, memberships: np.ndarray):
        mu0, mu1, empty0 = adjacent_arm_means(self.mechanism, self.population, memberships)
        variances = np.broadcast_to(self.mechanism.variances, (self.population.num_snvs,))
        shift = mu1 - mu0
        m_eq = np.sqrt(np.sum(shift ** 2 / variances, axis=2))
        proj = np.sum((releases[:, None, :] - mu0) * shift / variances, axis=2)
        blind = m_eq <= 1e-15
        z = np.where(blind, 0.0, proj / np.where(blind, 1.0, m_eq))
        claims = z >= self.z_alpha
        claims[blind] = self.rng.random(int(blind.sum())) < self.alpha
        # H0 would be the empty beacon, which the prior rules out
        z[empty0], claims[empty0] = np.inf, True
        return np.minimum(z, 1e12), claims

    def _decide_by_simulation(self, release: np.ndarray, bits: np.ndarray):
        mu0, mu1, empty0 = (a[0] for a in adjacent_arm_means(self.mechanism, self.population, bits[None, :]))
        k = bits.size
        conf = np.empty(k)
        claims = np.empty(k, dtype=bool)
        for i in range(k):
            if empty0[i]:
                conf[i], claims[i] = 1e12, True
                continue
            if np.allclose(mu0[i], mu1[i], rtol=0.0, atol=1e-15):
                conf[i], claims[i] = 0.0, self.rng.random() < self.alpha
                continue
            if self.mechanism.kind == MechanismKind.zero:
                hit = np.allclose(release, mu1[i], rtol=0.0, atol=1e-12)
                conf[i], claims[i] = (1.0 if hit else -1.0), hit
                continue
            b0 = bits.copy()
            b0[i] = False
            b1 = bits.copy()
            b1[i] = True
            pair = np.vstack([b0, b1])
            observed = log_likelihood_matrix(self.mechanism, self.population, pair, release[None, :])[0]
            null, _, _ = sample_releases(self.mechanism, self.population, np.tile(b0, (self.null_samples, 1)), self.rng)
            null_ll = log_likelihood_matrix(self.mechanism, self.population, pair, null)
            null_stat = null_ll[:, 1] - null_ll[:, 0]
            tau = float(np.quantile(null_stat, 1.0 - self.alpha, method="inverted_cdf"))
            stat = observed[1] - observed[0]
            conf[i], claims[i] = stat - tau, stat > tau
        return conf, claims

    def decide(self, releases: np.ndarray, oracle_b: Optional[np.ndarray] = None) -> AttackDecision:
        if oracle_b is None:
            raise CalibrationError("the optimal LRT conditions on b_{-k}; pass oracle_b")
        single = np.asarray(releases).ndim == 1
        releases = np.atleast_2d(np.asarray(releases, dtype=float))
        oracle_b = np.atleast_2d(np.asarray(oracle_b).astype(bool))
        if self.mechanism.kind == MechanismKind.gaussian:
            k, m = oracle_b.shape[1], releases.shape[1]
            step = max(1, _ARM_CHUNK // (k * m))
            parts = [
                self._decide_gaussian(releases[s:s + step], oracle_b[s:s + step])
                for s in range(0, releases.shape[0], step)
            ]
        else:
            parts = [self._decide_by_simulation(r, b) for r, b in zip(releases, oracle_b)]
            parts = [(c[None, :], s[None, :]) for c, s in parts]
        conf = np.concatenate([c for c, _ in parts])
        claims = np.concatenate([s for _, s in parts])
        if single:
            conf, claims = conf[0], claims[0]
        return AttackDecision(confidences=conf, claims=claims)


def optimal_lrt_attack_gaussian(
    population: Population,
    released_stats,
    mechanism: ReleaseMechanism,
    alpha: float,
    target_k: Optional[int] = None,
    conditioning_b=None,
    rng_seed: SeedLike = None,
) -> AttackDecision:
    """Optimal α-LRT decisions on one release; restricted to target_k when given."""
    if conditioning_b is None:
        raise CalibrationError("conditioning_b (supplying b_{-k}) is required")
    bits = conditioning_b.bits if isinstance(conditioning_b, MembershipVector) else np.asarray(conditioning_b).astype(bool)
    attacker = OptimalLrtAttacker(mechanism, population, alpha, rng_seed)
    decision = attacker.decide(np.asarray(released_stats, dtype=float), bits)
    if target_k is None:
        return decision
    return AttackDecision(decision.confidences[[target_k]], decision.claims[[target_k]])
