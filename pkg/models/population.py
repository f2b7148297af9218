"""
models/population.py - Universe, beacon membership and summary statistics

Genotype coding: d[k, j] = 1 means individual k carries the alternate allele
at SNV j; reference_aafs and summary statistics are alternate-allele
frequencies. Everything here is immutable once built.
"""

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from utils.exceptions import PopulationError


@dataclass(frozen=True, eq=False)
class Population:
    """Binary SNV matrix of the universe plus reference allele frequencies."""

    genotypes: np.ndarray
    reference_aafs: np.ndarray

    def __post_init__(self):
        genotypes = np.asarray(self.genotypes)
        aafs = np.asarray(self.reference_aafs, dtype=float)
        if genotypes.ndim != 2 or genotypes.shape[0] < 1 or genotypes.shape[1] < 1:
            raise PopulationError(
                "genotypes must be a non-empty K x m matrix",
                {"shape": list(genotypes.shape)},
            )
        if not np.isin(genotypes, (0, 1)).all():
            raise PopulationError("genotype entries must be 0 or 1")
        if aafs.shape != (genotypes.shape[1],):
            raise PopulationError(
                "reference_aafs length must equal the number of SNVs",
                {"expected": genotypes.shape[1], "got": list(aafs.shape)},
            )
        if not np.all((aafs > 0.0) & (aafs < 1.0)):
            bad = np.flatnonzero(~((aafs > 0.0) & (aafs < 1.0)))
            raise PopulationError(
                "reference allele frequencies must lie strictly inside (0, 1)",
                {"snvs": bad[:10].tolist()},
            )
        genotypes = genotypes.astype(np.uint8)
        genotypes.setflags(write=False)
        aafs = aafs.copy()
        aafs.setflags(write=False)
        object.__setattr__(self, "genotypes", genotypes)
        object.__setattr__(self, "reference_aafs", aafs)

    @property
    def num_individuals(self) -> int:
        return int(self.genotypes.shape[0])

    @property
    def num_snvs(self) -> int:
        return int(self.genotypes.shape[1])

    def rows(self, index: Sequence[int]) -> "Population":
        """Sub-population on the given rows, same reference frequencies."""
        return Population(self.genotypes[np.asarray(index, dtype=int)], self.reference_aafs)

    def split_reference(self, n_reference: int, rng: np.random.Generator) -> tuple:
        """Split into (universe, reference pool) with disjoint rows.

        The reference pool plays the attacker's public individuals used by the
        adaptive threshold.
        """
        if not 1 <= n_reference < self.num_individuals:
            raise PopulationError(
                "reference pool must leave at least one individual in the universe",
                {"n_reference": n_reference, "num_individuals": self.num_individuals},
            )
        order = rng.permutation(self.num_individuals)
        return self.rows(np.sort(order[n_reference:])), self.rows(np.sort(order[:n_reference]))

    def same_as(self, other: "Population") -> bool:
        return (
            np.array_equal(self.genotypes, other.genotypes)
            and np.array_equal(self.reference_aafs, other.reference_aafs)
        )


@dataclass(frozen=True, eq=False)
class MembershipVector:
    """b in {0,1}^K; the beacon is B = {k : b_k = 1}."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 1 or bits.size < 1:
            raise PopulationError("membership vector must be a non-empty 1-D array")
        if not np.isin(bits, (0, 1)).all():
            raise PopulationError("membership bits must be 0 or 1")
        bits = bits.astype(bool)
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @classmethod
    def from_members(cls, num_individuals: int, members: Sequence[int]) -> "MembershipVector":
        bits = np.zeros(num_individuals, dtype=bool)
        bits[np.asarray(members, dtype=int)] = True
        return cls(bits)

    @property
    def members(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    @property
    def size(self) -> int:
        return int(self.bits.sum())

    def with_bit(self, k: int, value: bool) -> "MembershipVector":
        bits = self.bits.copy()
        bits[k] = bool(value)
        return MembershipVector(bits)


class PriorKind(str, enum.Enum):
    independent = "independent-bernoulli"
    uniform = "uniform"
    table = "explicit-table"


@dataclass(frozen=True, eq=False)
class MembershipPrior:
    """A distribution over membership vectors (the true q or a subjective sigma).

    Samples are conditioned on a non-empty beacon; the empty vector has no
    summary statistics.
    """

    kind: PriorKind
    num_individuals: int
    rates: Optional[np.ndarray] = None
    support: Optional[np.ndarray] = None
    probabilities: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.num_individuals < 1:
            raise PopulationError("prior needs at least one individual")
        if self.kind == PriorKind.independent:
            rates = np.asarray(self.rates, dtype=float)
            if rates.shape != (self.num_individuals,):
                raise PopulationError("one membership rate per individual is required")
            if np.any((rates < 0) | (rates > 1)):
                raise PopulationError("membership rates must lie in [0, 1]")
            if not np.any(rates > 0):
                raise PopulationError("at least one membership rate must be positive")
            object.__setattr__(self, "rates", rates)
        elif self.kind == PriorKind.table:
            support = np.asarray(self.support).astype(bool)
            probs = np.asarray(self.probabilities, dtype=float)
            if support.ndim != 2 or support.shape[1] != self.num_individuals:
                raise PopulationError("table support must be an n x K binary matrix")
            if probs.shape != (support.shape[0],):
                raise PopulationError("one probability per support vector is required")
            if np.any(probs < 0) or not np.isclose(probs.sum(), 1.0, atol=1e-9):
                raise PopulationError(
                    "table probabilities must be nonnegative and sum to 1",
                    {"sum": float(probs.sum())},
                )
            if np.any(support.sum(axis=1) == 0) and np.any(probs[support.sum(axis=1) == 0] > 0):
                raise PopulationError("the empty beacon cannot carry prior mass")
            object.__setattr__(self, "support", support)
            object.__setattr__(self, "probabilities", probs)

    # ── constructors ───────────────────────────────────────────

    @classmethod
    def independent(cls, rates) -> "MembershipPrior":
        rates = np.asarray(rates, dtype=float)
        return cls(PriorKind.independent, int(rates.size), rates=rates)

    @classmethod
    def bernoulli(cls, num_individuals: int, rate: float) -> "MembershipPrior":
        return cls.independent(np.full(num_individuals, float(rate)))

    @classmethod
    def uniform(cls, num_individuals: int) -> "MembershipPrior":
        return cls(PriorKind.uniform, num_individuals)

    @classmethod
    def table(cls, support, probabilities) -> "MembershipPrior":
        support = np.asarray(support)
        return cls(PriorKind.table, int(support.shape[1]), support=support, probabilities=probabilities)

    @classmethod
    def point_mass(cls, b: MembershipVector) -> "MembershipPrior":
        return cls.table(b.bits[None, :], [1.0])

    # ── queries ────────────────────────────────────────────────

    @property
    def member_rates(self) -> np.ndarray:
        """Unconditional marginal P(b_k = 1) before the non-empty conditioning."""
        if self.kind == PriorKind.independent:
            return self.rates
        if self.kind == PriorKind.uniform:
            return np.full(self.num_individuals, 0.5)
        return self.probabilities @ self.support

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """n non-empty membership vectors as an (n, K) boolean matrix."""
        if self.kind == PriorKind.table:
            idx = rng.choice(self.support.shape[0], size=n, p=self.probabilities)
            return self.support[idx].copy()
        rates = self.member_rates
        out = rng.random((n, self.num_individuals)) < rates
        empty = ~out.any(axis=1)
        while empty.any():
            out[empty] = rng.random((int(empty.sum()), self.num_individuals)) < rates
            empty = ~out.any(axis=1)
        return out

    def log_prob(self, vectors: np.ndarray) -> np.ndarray:
        """Unnormalized log prior of each row (the non-empty renormalization cancels in posteriors)."""
        vectors = np.asarray(vectors).astype(bool)
        if self.kind == PriorKind.uniform:
            return np.full(vectors.shape[0], -self.num_individuals * np.log(2.0))
        if self.kind == PriorKind.independent:
            with np.errstate(divide="ignore"):
                log_on = np.log(self.rates)
                log_off = np.log1p(-self.rates)
            return np.where(vectors, log_on, log_off).sum(axis=1)
        lookup = {row.tobytes(): p for row, p in zip(self.support, self.probabilities)}
        with np.errstate(divide="ignore"):
            return np.log(np.array([lookup.get(row.tobytes(), 0.0) for row in vectors]))

    def enumerable_support(self, max_k: int) -> np.ndarray:
        """Every non-empty vector with positive prior mass, as an (n, K) matrix."""
        if self.kind == PriorKind.table:
            keep = self.probabilities > 0
            return self.support[keep]
        if self.num_individuals > max_k:
            raise PopulationError(
                f"cannot enumerate 2^{self.num_individuals} membership vectors",
                {"max_k": max_k},
            )
        codes = np.arange(1, 2 ** self.num_individuals, dtype=np.int64)
        vectors = ((codes[:, None] >> np.arange(self.num_individuals)) & 1).astype(bool)
        if self.kind == PriorKind.independent:
            vectors = vectors[np.isfinite(self.log_prob(vectors))]
        return vectors

    def to_dict(self) -> dict:
        payload = {"kind": self.kind.value, "num_individuals": self.num_individuals}
        if self.rates is not None:
            payload["rates"] = self.rates.tolist()
        if self.support is not None:
            payload["support"] = self.support.astype(int).tolist()
            payload["probabilities"] = self.probabilities.tolist()
        return payload


@dataclass(frozen=True, eq=False)
class SummaryStats:
    """x in [0,1]^m: alternate-allele frequencies among beacon members."""

    values: np.ndarray
    beacon_size: int = field(default=1)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if np.any((values < 0) | (values > 1)):
            raise PopulationError("summary statistics must lie in [0, 1]")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
