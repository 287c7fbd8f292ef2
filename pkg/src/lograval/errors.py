"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`LograError`.
The three top-level families map onto CLI exit codes (config 2, artifact 3,
numeric 4); anything else is a plain usage error.
"""


class LograError(Exception):
    """Base class for all package errors."""

    exit_code = 1
    kind = "error"


class ConfigError(LograError, ValueError):
    exit_code = 2
    kind = "config"


class ArtifactMismatchError(LograError):
    """An on-disk artifact does not match what the caller expects."""

    exit_code = 3
    kind = "artifact"


class FormatError(ArtifactMismatchError):
    """Bad magic, unsupported version, truncated or corrupt file."""


class NumericError(LograError, ArithmeticError):
    exit_code = 4
    kind = "numeric"


class SingularMatrixError(NumericError):
    pass


class ConvergenceError(NumericError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


class TrainingDivergedError(NumericError):
    def __init__(self, epoch: int, step: int, loss: float):
        super().__init__(
            f"non-finite training loss {loss!r} at epoch {epoch}, step {step}"
        )
        self.epoch = epoch
        self.step = step
        self.loss = loss


class DimensionError(LograError, ValueError):
    pass


class PreconditionError(LograError, RuntimeError):
    """An operation was called before the state it depends on exists."""


class RankError(LograError, ValueError):
    def __init__(self, message: str, effective_rank: int):
        super().__init__(f"{message} (effective rank {effective_rank})")
        self.effective_rank = effective_rank


class StoreError(LograError):
    pass


class DuplicateIdError(StoreError, KeyError):
    def __init__(self, data_id: int):
        super().__init__(f"duplicate data_id {data_id}")
        self.data_id = data_id

    def __str__(self):
        return self.args[0]


class UnknownIdError(StoreError, KeyError):
    def __init__(self, data_id: int):
        super().__init__(f"unknown data_id {data_id}")
        self.data_id = data_id

    def __str__(self):
        return self.args[0]


class ZeroSelfInfluenceError(NumericError):
    def __init__(self, data_id, side: str):
        super().__init__(f"zero self-influence for {side} id {data_id}")
        self.data_id = data_id
        self.side = side
