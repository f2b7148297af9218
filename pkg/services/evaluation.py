"""
services/evaluation.py - ROC/AUC, seed aggregation, utility-matched ε-DP, config hashing
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy.optimize import brentq
from scipy.stats import rankdata
from sklearn.metrics import auc, roc_curve

from models.mechanism import ReleaseMechanism
from models.population import MembershipPrior, Population
from services.lrt import expected_beacon_size
from services.mechanisms import expected_utility_loss, laplace_mechanism
from services.population import sensitivity as l1_sensitivity
from utils.exceptions import EvaluationError
from utils.io import write_csv
from utils.rng import SeedLike, as_generator

logger = logging.getLogger(__name__)

MATCH_RTOL = 0.01


# ── ROC ────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float
    n_pos: int
    n_neg: int

    @property
    def points(self) -> List[tuple]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))

    def write_csv(self, path: Union[str, Path]) -> Path:
        return write_csv(path, ("fpr", "tpr"), zip(self.fpr, self.tpr))

    def to_dict(self) -> dict:
        return {"auc": self.auc, "n_pos": self.n_pos, "n_neg": self.n_neg}


def roc_auc(confidences, labels) -> RocCurve:
    """Threshold sweep over every distinct confidence; tied scores enter together.

    The trapezoid over that sweep equals the Mann-Whitney U statistic divided
    by n_pos * n_neg, with ties counted as one half.
    """
    scores = np.asarray(confidences, dtype=float).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if scores.shape != y.shape:
        raise EvaluationError("confidences and labels must have the same length", {"scores": scores.size, "labels": y.size})
    if np.isnan(scores).any():
        raise EvaluationError("confidences contain NaN")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("ROC needs both positive and negative labels", {"n_pos": n_pos, "n_neg": n_neg})
    if not np.isfinite(scores).all():
        # order-preserving stand-in for ±inf
        scores = rankdata(scores, method="dense").astype(float)

    fpr, tpr, thresholds = roc_curve(y, scores, drop_intermediate=False)
    return RocCurve(fpr, tpr, thresholds, float(auc(fpr, tpr)), n_pos, n_neg)


def mann_whitney_auc(confidences, labels) -> float:
    """Rank-sum AUC; the independent check on `roc_auc`."""
    scores = np.asarray(confidences, dtype=float).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("Mann-Whitney AUC needs both classes")
    ranks = rankdata(scores)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# ── seeds ──────────────────────────────────────────────────────

@dataclass(frozen=True)
class SeedAggregate:
    mean: float
    std: float
    per_seed: List[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "per_seed": self.per_seed}


def aggregate_seeds(values: Sequence[float]) -> SeedAggregate:
    """Mean and sample standard deviation (ddof = 1) over seeds."""
    values = [float(v) for v in values]
    if not values:
        raise EvaluationError("nothing to aggregate")
    if len(values) < 2:
        logger.warning("⚠️ Standard deviation needs at least two seeds; reporting NaN")
        return SeedAggregate(values[0], float("nan"), values)
    arr = np.asarray(values)
    return SeedAggregate(float(arr.mean()), float(arr.std(ddof=1)), values)


def config_hash(config: dict) -> str:
    """SHA-256 of the canonical (sorted, compact) JSON form."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ── utility matching ───────────────────────────────────────────

def heterogeneous_kappa(num_snvs: int, fraction: float = 0.1, high: float = 50.0, rng_seed: SeedLike = None) -> np.ndarray:
    """κ_j = high on a uniformly chosen `fraction` of SNVs, 0 elsewhere."""
    if not 0.0 <= fraction <= 1.0:
        raise EvaluationError("fraction must lie in [0, 1]", {"fraction": fraction})
    rng = as_generator(rng_seed)
    kappa = np.zeros(num_snvs)
    kappa[rng.choice(num_snvs, size=int(round(fraction * num_snvs)), replace=False)] = float(high)
    return kappa


@dataclass(frozen=True)
class MatchResult:
    epsilon: float
    target_loss: float
    achieved_loss: float
    matched: bool
    target_se: float = 0.0

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "target_loss": self.target_loss,
            "achieved_loss": self.achieved_loss,
            "matched": self.matched,
            "target_se": self.target_se,
        }


def _unit_laplace_losses(kappa: np.ndarray, n: int, rng, batch: int = 1024):
    """Σ_j κ_j |L_j| for unit-scale Laplace draws; Laplace losses scale linearly with sens / ε."""
    draws, remaining = [], n
    while remaining > 0:
        size = min(batch, remaining)
        draws.append(np.abs(rng.laplace(0.0, 1.0, (size, kappa.size))) @ kappa)
        remaining -= size
    return np.concatenate(draws)


def matched_utility_dp(
    mechanism_bayes: ReleaseMechanism,
    population: Population,
    prior: MembershipPrior,
    kappa_vector,
    n_samples: int = 20000,
    rng_seed: SeedLike = None,
    sensitivity: Optional[float] = None,
    clip: bool = False,
    eps_bracket=(1e-3, 1e7),
) -> tuple:
    """ε of the Laplace mechanism whose E[Σ κ_j |δ_j|] matches the given defense.

    Common random numbers make the Laplace loss an exact function of ε, so a
    Brent search on log ε converges to the match. Returns (MatchResult, mechanism
    or None); a zero target cannot be matched by any finite ε.
    """
    rng = as_generator(rng_seed)
    kappa = np.broadcast_to(np.asarray(kappa_vector, dtype=float), (population.num_snvs,)).copy()
    if sensitivity is None:
        sensitivity = l1_sensitivity(population.num_snvs, expected_beacon_size(prior))

    target = expected_utility_loss(mechanism_bayes, population, prior, kappa, n_samples, rng)
    if not target.value > 0:
        logger.warning("⚠️ Target utility loss is zero; no finite ε matches it")
        return MatchResult(float("inf"), 0.0, 0.0, False, target.se), None

    unit = float(_unit_laplace_losses(kappa, n_samples, rng).mean())

    def gap(log_eps: float) -> float:
        return np.log(sensitivity / np.exp(log_eps) * unit) - np.log(target.value)

    lo, hi = np.log(eps_bracket[0]), np.log(eps_bracket[1])
    if gap(lo) < 0 or gap(hi) > 0:
        logger.warning(f"⚠️ Utility target {target.value:.4g} outside the ε bracket {eps_bracket}")
        return MatchResult(float("nan"), target.value, float("nan"), False, target.se), None

    epsilon = float(np.exp(brentq(gap, lo, hi, xtol=1e-12)))
    achieved = sensitivity / epsilon * unit
    matched = abs(achieved - target.value) <= MATCH_RTOL * target.value
    logger.info(f"🎯 Matched utility {target.value:.4g} with Laplace ε={epsilon:.4g}")
    return (
        MatchResult(epsilon, target.value, float(achieved), bool(matched), target.se),
        laplace_mechanism(epsilon, sensitivity, clip=clip),
    )
