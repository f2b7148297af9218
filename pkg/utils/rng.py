from typing import List, Optional, Union

import numpy as np

SeedLike = Union[None, int, np.random.Generator]


def as_generator(seed: SeedLike = None) -> np.random.Generator:
    """Accept a seed or an existing Generator; Generators pass through untouched."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def spawn(seed: SeedLike, n: int) -> List[np.random.Generator]:
    """Independent child streams, e.g. one per Monte Carlo worker."""
    if isinstance(seed, np.random.Generator):
        return seed.spawn(n)
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def stream_seed(seed: Optional[int], *labels: int) -> int:
    """Derive a reproducible integer seed for a labelled sub-task."""
    ss = np.random.SeedSequence([0 if seed is None else int(seed), *[int(x) for x in labels]])
    return int(ss.generate_state(1)[0])
