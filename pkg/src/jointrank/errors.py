"""Exception types raised across the package."""


class JointRankError(Exception):
    """Base class for all package errors."""


class UsageError(JointRankError, ValueError):
    """Caller passed arguments that violate an operation's contract."""


class ValidationError(JointRankError, ValueError):
    """Data failed a content check (non-finite values, dangling ids, bad labels)."""


class ParseError(JointRankError, ValueError):
    """A line-oriented file could not be parsed."""

    def __init__(self, path: str, line_no: int, message: str) -> None:
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class TrainingError(JointRankError, RuntimeError):
    """Training diverged (non-finite loss)."""
