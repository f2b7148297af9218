"""
schemas/experiment.py - Experiment config files (YAML) and the named scenarios

A config declares a population, a list of defenses, a list of attackers and
training/evaluation settings; every (defense, attacker) pair is one cell,
evaluated once per seed.
"""

import copy
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from utils.exceptions import ConfigError

DefenseKind = Literal["bayes", "fixed_lrt", "adaptive_lrt", "laplace", "gaussian", "zero", "matched_dp"]
AttackerKind = Literal["bayes", "fixed_lrt", "adaptive_lrt"]
PriorName = Literal["q", "uniform"]
TRAINED_DEFENSES = ("bayes", "fixed_lrt", "adaptive_lrt")


# ============================================================================
# SCHEMAS
# ============================================================================

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class AafSpec(_Strict):
    kind: Literal["beta", "uniform", "point"] = "beta"
    a: float = 0.5
    b: float = 2.0
    low: float = 0.01
    high: float = 0.99
    value: float = 0.5


class PopulationSpec(_Strict):
    num_individuals: int = Field(200, ge=1)
    num_snvs: int = Field(500, ge=1)
    beacon_rate: float = Field(0.5, gt=0.0, le=1.0)
    aaf: AafSpec = AafSpec()
    path: Optional[str] = None  # load instead of generating


class DefenseSpec(_Strict):
    kind: DefenseKind
    label: Optional[str] = None
    kappa: Union[float, Literal["heterogeneous"], None] = None
    epsilon: Optional[float] = Field(None, gt=0.0)
    m_hat: Optional[float] = Field(None, gt=0.0)
    k_min: Optional[int] = Field(None, ge=1)
    match: Optional[str] = None
    clip: Optional[bool] = None

    @field_validator("kappa")
    @classmethod
    def validate_kappa(cls, v):
        if isinstance(v, (int, float)) and v < 0:
            raise ValueError("kappa must be nonnegative")
        return v

    @model_validator(mode="after")
    def check_parameters(self):
        if self.kind == "laplace" and self.epsilon is None:
            raise ValueError("laplace defense needs epsilon")
        if self.kind == "gaussian" and (self.m_hat is None or self.k_min is None):
            raise ValueError("gaussian defense needs m_hat and k_min")
        if self.kind == "matched_dp" and not self.match:
            raise ValueError("matched_dp defense needs the label of the defense it matches")
        return self

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.kind == "laplace":
            return f"laplace-eps{self.epsilon:g}"
        if self.kind in TRAINED_DEFENSES and self.kappa is not None:
            kappa = "het" if self.kappa == "heterogeneous" else f"{self.kappa:g}"
            return f"{self.kind}-kappa{kappa}"
        return self.kind


class AttackerSpec(_Strict):
    kind: AttackerKind
    gamma: float = Field(0.5, gt=0.0, lt=1.0)
    sigma: PriorName = "q"


class TrainingSpec(_Strict):
    epochs: int = Field(60, ge=1)
    batches_per_epoch: int = Field(20, ge=1)
    batch_size: int = Field(64, ge=2)
    defender_lr: float = Field(1e-3, gt=0.0)
    attacker_lr: float = Field(1e-4, gt=0.0)
    weight_decay: float = Field(1e-5, ge=0.0)
    lr_decay: float = Field(0.988, gt=0.0, le=1.0)
    q_aux: Optional[int] = Field(None, ge=1)
    batch_norm: bool = True
    kappa_on_privacy: bool = False
    defender_hidden: Optional[List[int]] = None
    attacker_hidden: Optional[List[int]] = None


class GridSpec(_Strict):
    kappa: Optional[List[float]] = None
    epsilon: Optional[List[float]] = None


class EvaluationSpec(_Strict):
    eval_beacons: int = Field(200, ge=1)
    alpha: float = Field(0.05, gt=0.0, lt=1.0)
    calibration_samples: int = Field(5000, ge=1000)
    utility_samples: int = Field(2000, ge=2)
    heterogeneous_fraction: float = Field(0.1, ge=0.0, le=1.0)
    heterogeneous_kappa: float = Field(50.0, ge=0.0)


class OrderingSpec(_Strict):
    sigmas: List[PriorName] = ["q", "uniform"]
    alpha: float = Field(0.05, gt=0.0, lt=1.0)
    mc_samples: int = Field(20000, ge=100)
    calibration_samples: int = Field(20000, ge=1000)
    n_se: float = Field(3.0, gt=0.0)


class ExperimentConfig(_Strict):
    name: str = "experiment"
    scenario: Optional[str] = None
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4], min_length=1)
    population: PopulationSpec = PopulationSpec()
    defenses: List[DefenseSpec] = Field(default_factory=list)
    attackers: List[AttackerSpec] = Field(default_factory=list)
    training: TrainingSpec = TrainingSpec()
    grid: GridSpec = GridSpec()
    evaluation: EvaluationSpec = EvaluationSpec()
    ordering: Optional[OrderingSpec] = None

    @model_validator(mode="after")
    def check_defenses(self):
        if not self.defenses:
            raise ValueError("at least one defense is required")
        names = [d.name for d in self.expanded_defenses()]
        if len(set(names)) != len(names):
            raise ValueError(f"defense labels must be unique, got {names}")
        for d in self.defenses:
            if d.kind == "matched_dp" and d.match not in names:
                raise ValueError(f"matched_dp refers to unknown defense '{d.match}'")
        if self.ordering is not None and any(d.kind != "gaussian" for d in self.defenses):
            raise ValueError("the ordering check runs on Gaussian defenses only")
        return self

    def expanded_defenses(self) -> List[DefenseSpec]:
        """Grid expansion: κ values fill trained defenses without κ, ε values fill Laplace defenses."""
        out = []
        for d in self.defenses:
            if d.kind in TRAINED_DEFENSES and d.kappa is None and self.grid.kappa:
                out += [d.model_copy(update={"kappa": k}) for k in self.grid.kappa]
            elif d.kind == "laplace" and self.grid.epsilon:
                out += [d.model_copy(update={"epsilon": e}) for e in self.grid.epsilon]
            elif d.kind in TRAINED_DEFENSES and d.kappa is None:
                out.append(d.model_copy(update={"kappa": 0.0}))
            else:
                out.append(d)
        return out


# ============================================================================
# LOADING
# ============================================================================

def _error_paths(exc: ValidationError) -> List[str]:
    paths = []
    for err in exc.errors():
        loc = ".".join(str(part) for part in err["loc"]) or "<root>"
        paths.append(f"{loc}: {err['msg']}")
    return paths


def validate_config(payload: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(payload or {})
    except ValidationError as e:
        raise ConfigError("invalid experiment config", {"errors": _error_paths(e)})


def load_experiment_config(path: Union[str, Path], overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    path = Path(path)
    try:
        payload = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config file: {e}", {"path": str(path)})
    if not isinstance(payload, dict):
        raise ConfigError("config file must hold a mapping", {"path": str(path)})
    scenario = payload.pop("scenario", None)
    merged = _merge(payload, overrides or {})
    if scenario is not None:
        return scenario_config(scenario, merged)
    return validate_config(merged)


# ============================================================================
# SCENARIOS
# ============================================================================

_ALL_ATTACKERS = [{"kind": "bayes"}, {"kind": "fixed_lrt"}, {"kind": "adaptive_lrt"}]

SCENARIOS: Dict[str, Dict[str, Any]] = {
    "bayes-kappa0": {"defenses": [{"kind": "bayes", "kappa": 0.0}], "attackers": _ALL_ATTACKERS},
    "bayes-kappa1.5": {"defenses": [{"kind": "bayes", "kappa": 1.5}], "attackers": _ALL_ATTACKERS},
    "bayes-kappa50": {"defenses": [{"kind": "bayes", "kappa": 50.0}], "attackers": _ALL_ATTACKERS},
    "defender-comparison": {
        "defenses": [
            {"kind": "bayes", "kappa": 1.5},
            {"kind": "fixed_lrt", "kappa": 1.5},
            {"kind": "adaptive_lrt", "kappa": 1.5},
        ],
        "attackers": [{"kind": "bayes"}],
    },
    "laplace-eps600": {"defenses": [{"kind": "laplace", "epsilon": 600.0}], "attackers": _ALL_ATTACKERS},
    "matched-dp": {
        "defenses": [
            {"kind": "bayes", "kappa": "heterogeneous", "label": "bayes"},
            {"kind": "matched_dp", "match": "bayes", "label": "matched-dp"},
        ],
        "attackers": [{"kind": "bayes"}],
    },
    "ordering": {
        "population": {"num_individuals": 10, "num_snvs": 16, "beacon_rate": 0.5},
        "defenses": [{"kind": "gaussian", "m_hat": 8.0, "k_min": 5, "clip": False}],
        "attackers": [],
        "ordering": {},
    },
}


def _merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Recursive dict merge; lists and scalars in overrides replace base values."""
    out = copy.deepcopy(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def scenario_config(name: str, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    if name not in SCENARIOS:
        raise ConfigError(f"unknown scenario '{name}'", {"scenario": name, "allowed": sorted(SCENARIOS)})
    payload = _merge(SCENARIOS[name], {"name": name, "scenario": name})
    return validate_config(_merge(payload, overrides or {}))
