"""Exception types shared across the package."""


class FCPError(Exception):
    """Base class for all package errors."""


class InvalidInputError(FCPError, ValueError):
    """An argument violates a documented precondition."""


class EmptySketchError(FCPError):
    """A quantile was requested from a sketch holding no values."""


class DecodeError(FCPError):
    """Serialized sketch bytes are corrupt or truncated."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ParseError(FCPError):
    """A score file row does not match the expected schema."""

    def __init__(self, message, line):
        super().__init__(f"line {line}: {message}")
        self.line = line


class FormatError(FCPError):
    """A score file is internally inconsistent (e.g. varying class count)."""


class TrainingError(FCPError):
    """Federated training produced a non-finite loss."""

    def __init__(self, message, round_index):
        super().__init__(f"round {round_index}: {message}")
        self.round_index = round_index


class DegenerateCalibrationWarning(UserWarning):
    """Temperature fitting fell back to T = 1."""


class VacuousQuantileWarning(UserWarning):
    """The requested rank exceeds the number of calibration scores."""
