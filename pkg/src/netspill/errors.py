"""Pipeline exceptions. Each carries the stage that failed and, when known, the group."""
from __future__ import annotations


class EstimationError(RuntimeError):
    stage = "estimate"

    def __init__(self, message: str, *, group: str | None = None, stage: str | None = None,
                 **details):
        super().__init__(message)
        if stage is not None:
            self.stage = stage
        self.group = group
        self.details = details

    def to_dict(self) -> dict:
        out = {"stage": self.stage, "group": self.group, "message": str(self)}
        out.update({k: v for k, v in self.details.items() if v is not None})
        return out


class SingularGramError(EstimationError):
    stage = "instruments"


class RankDeficientError(EstimationError):
    stage = "initial_estimator"


class IllConditionedWeightError(EstimationError):
    stage = "weight_matrix"


class DegenerateGroupError(EstimationError):
    stage = "moment_matrices"
