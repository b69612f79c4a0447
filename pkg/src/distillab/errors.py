"""Exception types shared across the package."""


class ContractError(ValueError):
    """An argument violates a documented precondition or invariant."""


class NumericError(FloatingPointError):
    """A computation produced NaN or Inf where finite values are required."""


class ParseError(ValueError):
    """A data file is malformed. Carries the byte offset of the failure."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ManifestError(ValueError):
    """An experiment manifest failed validation. Carries all messages."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid manifest:\n" + "\n".join(f"  - {p}" for p in self.problems))
