from typing import Optional

from dbt_common.exceptions import DbtRuntimeError, DbtValidationError


class NerpRuntimeError(DbtRuntimeError):
    CODE = 20001
    MESSAGE = "NeRP runtime error"

    @property
    def type(self):
        return "NeRP Runtime"


class NerpValidationError(DbtValidationError):
    CODE = 20002
    MESSAGE = "NeRP validation error"

    @property
    def type(self):
        return "NeRP Validation"


class InvalidConfig(NerpValidationError):
    pass


class InvalidScene(NerpValidationError):
    pass


class ShapeMismatch(NerpValidationError):
    pass


class NonFinite(NerpValidationError):
    pass


class CountMismatch(NerpValidationError):
    pass


class EmptyGroup(NerpValidationError):
    pass


class MissingLabel(NerpValidationError):
    pass


class DegenerateCloud(NerpValidationError):
    pass


class EmptyDataset(NerpValidationError):
    pass


class ClassImbalance(NerpValidationError):
    def __init__(self, positive_fraction: float, low: float, high: float) -> None:
        self.positive_fraction = positive_fraction
        super().__init__(
            f"Positive class fraction {positive_fraction:.3f} is outside [{low:.2f}, {high:.2f}]"
        )


class PlacementExhausted(NerpRuntimeError):
    pass


class TargetInfeasible(PlacementExhausted):
    pass


class UnknownObject(NerpRuntimeError):
    def __init__(self, object_id: int) -> None:
        self.object_id = object_id
        super().__init__(f"Object {object_id} does not exist in the scene")


class NoFeasibleDelta(NerpRuntimeError):
    pass


class UntrainedBundle(NerpRuntimeError):
    pass


class MissingCheckpoint(NerpRuntimeError):
    pass


class CheckpointMismatch(NerpRuntimeError):
    pass


class CorruptRecord(NerpRuntimeError):
    def __init__(self, path: str, line: int, reason: str) -> None:
        self.path = path
        self.line = line
        super().__init__(f"Corrupt record at {path}:{line}: {reason}")


class NonFiniteLoss(NerpRuntimeError):
    def __init__(self, sample_id: str, value: Optional[float] = None) -> None:
        self.sample_id = sample_id
        super().__init__(f"Non-finite loss {value!r} on sample {sample_id}; aborting training")
