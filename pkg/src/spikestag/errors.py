"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An operation received tensors with incompatible shapes."""

    def __init__(self, op: str, shape_a, shape_b) -> None:
        super().__init__(f"{op}: incompatible shapes {tuple(shape_a)} and {tuple(shape_b)}")
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)


class ContractError(ValueError):
    """A documented precondition of an operation was violated by the caller."""


class SingularThresholdError(ContractError):
    """Neighbor pruning hit a zero self-loop weight, so the threshold is undefined."""


class IngestionError(ValueError):
    """A dataset file violates the expected CSV schema."""


class CheckpointFormatError(ValueError):
    """A checkpoint file is corrupt or does not carry the expected magic."""


class UndefinedMetricError(ValueError):
    """A metric denominator vanished (constant target series)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite parameter value."""

    def __init__(self, param_name: str) -> None:
        super().__init__(f"training diverged: parameter '{param_name}' became non-finite")
        self.param_name = param_name
