"""
services/population.py - Synthetic universes, summary statistics, sensitivity, file IO

File format (UTF-8, LF):
    line 1   "K m"
    line 2   m space-separated reference AAFs
    K lines  m space-separated 0/1 genotypes
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from scipy import stats

from models.population import MembershipVector, Population, SummaryStats
from utils.exceptions import PopulationError
from utils.io import atomic_write_text
from utils.rng import SeedLike, as_generator

logger = logging.getLogger(__name__)

# Default cohort size: 800 individuals over 5000 SNVs
DEFAULT_NUM_INDIVIDUALS = 800
DEFAULT_NUM_SNVS = 5000


@dataclass(frozen=True)
class AafDistribution:
    """Parametric family for reference alternate-allele frequencies.

    kind = "beta": Beta(a, b) truncated to [low, high] (exact truncation)
    kind = "uniform": Uniform(low, high)
    kind = "point": every frequency equals `value`
    """

    kind: str = "beta"
    a: float = 0.5
    b: float = 2.0
    low: float = 0.01
    high: float = 0.99
    value: float = 0.5

    def validate(self) -> None:
        if self.kind == "point":
            if not 0.0 < self.value < 1.0:
                raise PopulationError("point-mass frequency must lie in (0, 1)", {"value": self.value})
            return
        if self.kind not in ("beta", "uniform"):
            raise PopulationError(f"unknown allele-frequency family '{self.kind}'")
        if not 0.0 < self.low < self.high < 1.0:
            raise PopulationError(
                "truncation bounds must satisfy 0 < low < high < 1",
                {"low": self.low, "high": self.high},
            )
        if self.kind == "beta" and (self.a <= 0 or self.b <= 0):
            raise PopulationError("Beta shape parameters must be positive", {"a": self.a, "b": self.b})

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        self.validate()
        if self.kind == "point":
            return np.full(size, float(self.value))
        if self.kind == "uniform":
            return rng.uniform(self.low, self.high, size)
        dist = stats.beta(self.a, self.b)
        u = rng.uniform(dist.cdf(self.low), dist.cdf(self.high), size)
        return np.clip(dist.ppf(u), self.low, self.high)


def generate_population(
    num_individuals: int = DEFAULT_NUM_INDIVIDUALS,
    num_snvs: int = DEFAULT_NUM_SNVS,
    aaf_distribution: AafDistribution = AafDistribution(),
    rng_seed: SeedLike = None,
) -> Population:
    """Draw p̄_j i.i.d. from the AAF family, then d_kj ~ Bernoulli(p̄_j) independently."""
    if num_individuals < 1 or num_snvs < 1:
        raise PopulationError(
            "population needs K >= 1 and m >= 1",
            {"num_individuals": num_individuals, "num_snvs": num_snvs},
        )
    rng = as_generator(rng_seed)
    aafs = aaf_distribution.sample(rng, num_snvs)
    genotypes = (rng.random((num_individuals, num_snvs)) < aafs).astype(np.uint8)
    logger.debug(f"Generated population K={num_individuals} m={num_snvs} ({aaf_distribution.kind} AAFs)")
    return Population(genotypes, aafs)


def synthesize_reference(population: Population, n_reference: int, rng_seed: SeedLike = None) -> Population:
    """Public individuals drawn from the reference frequencies, disjoint from the universe by construction."""
    if n_reference < 1:
        raise PopulationError("reference pool needs at least one individual", {"n_reference": n_reference})
    rng = as_generator(rng_seed)
    aafs = population.reference_aafs
    genotypes = (rng.random((n_reference, aafs.size)) < aafs).astype(np.uint8)
    return Population(genotypes, aafs)


def _as_bits(b) -> np.ndarray:
    if isinstance(b, MembershipVector):
        return b.bits
    return np.asarray(b).astype(bool)


def summary_stats(population: Population, b) -> SummaryStats:
    """x_j = mean of column j over the beacon members."""
    bits = _as_bits(b)
    if bits.shape != (population.num_individuals,):
        raise PopulationError(
            "membership vector length must equal K",
            {"expected": population.num_individuals, "got": list(bits.shape)},
        )
    size = int(bits.sum())
    if size == 0:
        raise PopulationError("summary statistics of an empty beacon are undefined")
    values = population.genotypes[bits].mean(axis=0)
    return SummaryStats(values, beacon_size=size)


def summary_stats_batch(population: Population, memberships: np.ndarray) -> np.ndarray:
    """Row-wise summary statistics for an (n, K) batch of membership vectors."""
    memberships = np.asarray(memberships, dtype=float)
    sizes = memberships.sum(axis=1)
    if np.any(sizes == 0):
        raise PopulationError("summary statistics of an empty beacon are undefined")
    return (memberships @ population.genotypes) / sizes[:, None]


def sensitivity(num_snvs: int, k_min: int) -> float:
    """L1 sensitivity m / K† of the full statistics vector."""
    if k_min < 1:
        raise PopulationError("k_min must be at least 1", {"k_min": k_min})
    return float(num_snvs) / float(k_min)


def per_snv_sensitivity(k_min: int) -> float:
    """Adding or removing one member moves any x_j by at most 1 / K†."""
    return sensitivity(1, k_min)


def save_population(population: Population, path: Union[str, Path]) -> Path:
    lines = [
        f"{population.num_individuals} {population.num_snvs}",
        " ".join(repr(float(p)) for p in population.reference_aafs),
    ]
    lines.extend(" ".join(str(int(v)) for v in row) for row in population.genotypes)
    path = atomic_write_text(path, "\n".join(lines) + "\n")
    logger.info(f"💾 Saved population K={population.num_individuals} m={population.num_snvs} to {path}")
    return path


def load_population(path: Union[str, Path]) -> Population:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise PopulationError(f"cannot read population file: {e}", {"path": str(path)})

    lines = [line for line in text.split("\n") if line.strip()]
    if len(lines) < 2:
        raise PopulationError("population file needs a header and a frequency line", {"path": str(path)})
    try:
        k, m = (int(tok) for tok in lines[0].split())
    except ValueError:
        raise PopulationError("header must be 'K m'", {"line": lines[0][:80]})
    if len(lines) != k + 2:
        raise PopulationError(
            "genotype row count does not match header",
            {"expected": k, "got": len(lines) - 2},
        )
    try:
        aafs = np.array([float(tok) for tok in lines[1].split()])
        genotypes = np.array([[int(tok) for tok in line.split()] for line in lines[2:]])
    except ValueError as e:
        raise PopulationError(f"malformed population file: {e}", {"path": str(path)})
    if aafs.shape != (m,) or genotypes.shape != (k, m):
        raise PopulationError(
            "matrix dimensions do not match header",
            {"header": [k, m], "aafs": list(aafs.shape), "genotypes": list(genotypes.shape)},
        )
    population = Population(genotypes, aafs)
    logger.info(f"📂 Loaded population K={k} m={m} from {path}")
    return population
