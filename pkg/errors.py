"""Exceptions raised by the low-rank regularization toolkit."""


class LowRankError(Exception):
    pass


class SvdConvergenceError(LowRankError):
    def __init__(self, message="svd did not converge"):
        super().__init__(message)


class SmoothingError(LowRankError):
    def __init__(self, attempts):
        super().__init__(f"smoothing failed after {attempts} attempts")
        self.attempts = attempts


class CheckpointError(LowRankError):
    pass


class CheckpointVersionError(CheckpointError):
    def __init__(self, expected, found):
        super().__init__(
            f"checkpoint format version mismatch: expected {expected}, found {found}"
        )
        self.expected = expected
        self.found = found


class DatasetParseError(LowRankError):
    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class ConfigError(LowRankError):
    pass


class StageError(LowRankError):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
