"""
models/mechanism.py - Release mechanism descriptors g_D and released statistics

A mechanism describes the noise distribution g_D(δ | b); the released vector
is r = R(x(b) + δ) with R = Clip_[0,1] when `clip` is on and identity
otherwise.
"""

import enum
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import numpy as np

from utils.exceptions import MechanismError

# Per-b mean tables are only allowed on universes this small
MAX_TABLE_INDIVIDUALS = 20


class MechanismKind(str, enum.Enum):
    zero = "zero-noise"
    laplace = "laplace"
    gaussian = "gaussian"
    generator = "generator"


class MeanMapKind(str, enum.Enum):
    zero = "zero"
    affine = "affine"
    table = "table"


@dataclass(frozen=True, eq=False)
class MeanMap:
    """Mean M_b of the Gaussian noise as a function of the membership vector.

    affine: M_b^j = scale_j * x_j(b) + offset_j. scale = -1 cancels the
    statistic entirely, which gives a release independent of b.
    table: explicit per-b rows, keyed by the membership bit pattern.
    """

    kind: MeanMapKind = MeanMapKind.zero
    scale: Optional[np.ndarray] = None
    offset: Optional[np.ndarray] = None
    table: Optional[Dict[bytes, np.ndarray]] = None
    num_individuals: Optional[int] = None

    @classmethod
    def zero(cls) -> "MeanMap":
        return cls(MeanMapKind.zero)

    @classmethod
    def affine(cls, scale, offset=0.0, num_snvs: Optional[int] = None) -> "MeanMap":
        scale = np.atleast_1d(np.asarray(scale, dtype=float))
        offset = np.atleast_1d(np.asarray(offset, dtype=float))
        if num_snvs is not None:
            scale = np.broadcast_to(scale, (num_snvs,)).copy()
            offset = np.broadcast_to(offset, (num_snvs,)).copy()
        return cls(MeanMapKind.affine, scale=scale, offset=offset)

    @classmethod
    def blind(cls, num_snvs: int, level: float = 0.5) -> "MeanMap":
        """M_b = level - x(b): the pre-clip release no longer depends on b."""
        return cls.affine(-1.0, level, num_snvs=num_snvs)

    @classmethod
    def from_table(cls, memberships: np.ndarray, means: np.ndarray) -> "MeanMap":
        memberships = np.asarray(memberships).astype(bool)
        means = np.asarray(means, dtype=float)
        if memberships.shape[1] > MAX_TABLE_INDIVIDUALS:
            raise MechanismError(
                "per-membership mean tables are limited to small universes",
                {"num_individuals": int(memberships.shape[1]), "max": MAX_TABLE_INDIVIDUALS},
            )
        table = {row.tobytes(): mean for row, mean in zip(memberships, means)}
        return cls(MeanMapKind.table, table=table, num_individuals=int(memberships.shape[1]))

    def evaluate(self, stats: np.ndarray, memberships: np.ndarray) -> np.ndarray:
        """Means for a batch: stats is (n, m) summary statistics, memberships (n, K)."""
        stats = np.atleast_2d(stats)
        if self.kind == MeanMapKind.zero:
            return np.zeros_like(stats)
        if self.kind == MeanMapKind.affine:
            return stats * self.scale + self.offset
        memberships = np.atleast_2d(np.asarray(memberships).astype(bool))
        try:
            return np.stack([self.table[row.tobytes()] for row in memberships])
        except KeyError:
            raise MechanismError("mean table has no entry for a queried membership vector")

    def to_dict(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {"kind": self.kind.value}
        if self.kind == MeanMapKind.affine:
            payload["scale"] = self.scale.tolist()
            payload["offset"] = self.offset.tolist()
        if self.kind == MeanMapKind.table:
            payload["entries"] = len(self.table)
        return payload


@dataclass(frozen=True, eq=False)
class ReleaseMechanism:
    kind: MechanismKind
    clip: bool = False
    scale: Optional[float] = None
    variances: Optional[np.ndarray] = None
    mean_map: MeanMap = field(default_factory=MeanMap.zero)
    generator: Any = None
    label: str = ""
    params: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind == MechanismKind.laplace:
            if self.scale is None or not self.scale > 0:
                raise MechanismError("Laplace scale must be positive", {"scale": self.scale})
        if self.kind == MechanismKind.gaussian:
            variances = np.atleast_1d(np.asarray(self.variances, dtype=float))
            if variances.size == 0 or np.any(~(variances > 0)):
                raise MechanismError("Gaussian variances must be positive")
            object.__setattr__(self, "variances", variances)
        if self.kind == MechanismKind.generator and self.generator is None:
            raise MechanismError("generator-backed mechanism needs a trained generator")

    @property
    def has_density(self) -> bool:
        return self.kind != MechanismKind.generator and not self.clip

    def with_clip(self, clip: bool) -> "ReleaseMechanism":
        return ReleaseMechanism(
            kind=self.kind, clip=clip, scale=self.scale, variances=self.variances,
            mean_map=self.mean_map, generator=self.generator, label=self.label,
            params=dict(self.params),
        )

    def to_dict(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {"kind": self.kind.value, "clip": self.clip, "label": self.label}
        if self.scale is not None:
            payload["scale"] = float(self.scale)
        if self.variances is not None:
            v = self.variances
            payload["variance"] = float(v[0]) if np.all(v == v[0]) else v.tolist()
            payload["mean_map"] = self.mean_map.to_dict()
        payload.update(self.params)
        return payload


@dataclass(frozen=True, eq=False)
class Release:
    """Released vector r together with the pre-clip noise δ that produced it."""

    values: np.ndarray
    noise: np.ndarray

    def __post_init__(self):
        for name in ("values", "noise"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
