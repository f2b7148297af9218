from .population import Population, MembershipVector, MembershipPrior, PriorKind, SummaryStats
from .mechanism import ReleaseMechanism, MechanismKind, MeanMap, MeanMapKind, Release
from .decision import AttackDecision, Attacker, TradeoffPoint
from .experiment_run import ExperimentRun, CellResult

__all__ = [
    "Population",
    "MembershipVector",
    "MembershipPrior",
    "PriorKind",
    "SummaryStats",
    "ReleaseMechanism",
    "MechanismKind",
    "MeanMap",
    "MeanMapKind",
    "Release",
    "AttackDecision",
    "Attacker",
    "TradeoffPoint",
    "ExperimentRun",
    "CellResult",
]
