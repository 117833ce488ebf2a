"""Exception hierarchy shared by all stages.

Each class carries the process exit code the CLI maps it to.
"""


class Pseudo3DError(Exception):
    exit_code = 1


class InvalidArgumentError(Pseudo3DError, ValueError):
    exit_code = 2


class InvalidShapeError(Pseudo3DError, ValueError):
    exit_code = 2


class UnsupportedConfigError(Pseudo3DError, ValueError):
    exit_code = 3


class ConfigurationError(Pseudo3DError):
    exit_code = 3


class InvalidStateError(Pseudo3DError):
    exit_code = 3


class MissingConditionError(Pseudo3DError, ValueError):
    exit_code = 2


class NumericalError(Pseudo3DError):
    exit_code = 4


class TrainingDivergenceError(NumericalError):
    def __init__(self, step: int, loss: float, stage: str = ""):
        where = f" in stage {stage!r}" if stage else ""
        super().__init__(f"non-finite loss {loss} at step {step}{where}")
        self.step = step
        self.loss = loss
        self.stage = stage
