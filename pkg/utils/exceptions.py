"""
utils/exceptions.py - error hierarchy for the lab

Every failure the library raises on purpose is a LabError; the HTTP layer
and the CLI translate these into 4xx bodies / exit status 2.
"""

from typing import Any, Dict, Optional


class LabError(Exception):
    """Base class for all deliberate lab failures."""

    status_code: int = 400

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def to_dict(self) -> Dict[str, Any]:
        payload = {"error": type(self).__name__, "message": self.message}
        if self.details:
            payload["details"] = self.details
        return payload


class PopulationError(LabError):
    """Invalid population data, membership vectors or priors."""


class MechanismError(LabError):
    """Invalid mechanism parameters or unsupported density requests."""


class CalibrationError(LabError):
    """Threshold or significance calibration could not be carried out."""


class AnalysisError(LabError):
    """Arguments outside the domain of a trade-off or conversion formula."""


class PosteriorError(LabError):
    """Posterior computation failed (e.g. every weight underflowed)."""


class TrainingDivergedError(LabError):
    """A training loss became non-finite."""

    status_code = 500


class EvaluationError(LabError):
    """ROC/AUC or utility matching could not be evaluated."""


class ConfigError(LabError):
    """Experiment config failed schema validation."""

    status_code = 422
