"""Exception types shared across modules and mapped to CLI exit codes."""


class DataError(Exception):
    """Malformed, truncated, or mismatched data files (CLI exit code 1)."""


class DivergenceError(Exception):
    """Training produced a non-finite loss (CLI exit code 3)."""

    def __init__(self, epoch: int, step: int, message: str = ""):
        self.epoch = epoch
        self.step = step
        super().__init__(message or f"non-finite loss at epoch {epoch}, step {step}")
