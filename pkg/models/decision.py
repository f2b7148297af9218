"""
models/decision.py - Attack decisions, trade-off points and the attacker protocol
"""

from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np

from utils.exceptions import EvaluationError


@dataclass(frozen=True, eq=False)
class AttackDecision:
    """Per-individual membership scores and binary claims.

    Higher confidence always means "more likely a member", whatever the
    attacker, so ROC sweeps treat every attacker the same way. Arrays are
    (K,) for one release or (n, K) for a batch.
    """

    confidences: np.ndarray
    claims: np.ndarray

    def __post_init__(self):
        confidences = np.asarray(self.confidences, dtype=float)
        claims = np.asarray(self.claims).astype(bool)
        if confidences.shape != claims.shape:
            raise EvaluationError(
                "confidences and claims must have the same shape",
                {"confidences": list(confidences.shape), "claims": list(claims.shape)},
            )
        if np.isnan(confidences).any():
            raise EvaluationError("attack confidences must not be NaN")
        object.__setattr__(self, "confidences", confidences)
        object.__setattr__(self, "claims", claims)

    @property
    def num_claims(self) -> int:
        return int(self.claims.sum())

    def row(self, i: int) -> "AttackDecision":
        return AttackDecision(self.confidences[i], self.claims[i])


class Attacker(Protocol):
    """Anything that turns released statistics into an AttackDecision.

    `decide` receives an (n, m) batch of releases. `oracle_b` carries the
    true membership vectors and is only consulted by attackers whose
    definition conditions on b_{-k} (the Neyman–Pearson optimal test).
    """

    name: str

    def decide(self, releases: np.ndarray, oracle_b: Optional[np.ndarray] = None) -> AttackDecision:
        ...


@dataclass(frozen=True)
class TradeoffPoint:
    alpha: float
    beta: float

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise EvaluationError("trade-off coordinates must lie in [0, 1]", {"alpha": self.alpha, "beta": self.beta})
