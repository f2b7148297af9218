from dataclasses import asdict, dataclass
from typing import Dict

import numpy as np


@dataclass(frozen=True)
class Estimate:
    """Monte Carlo estimate with its standard error."""

    value: float
    se: float
    samples: int

    @classmethod
    def from_draws(cls, draws) -> "Estimate":
        draws = np.asarray(draws, dtype=float).ravel()
        n = draws.size
        se = float(draws.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
        return cls(value=float(draws.mean()), se=se, samples=int(n))

    def within(self, target: float, n_se: float = 3.0, slack: float = 0.0) -> bool:
        return abs(self.value - target) <= n_se * self.se + slack

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def combined_se(*estimates: Estimate) -> float:
    return float(np.sqrt(sum(e.se ** 2 for e in estimates)))
