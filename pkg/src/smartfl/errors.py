"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """An operation was called with arguments that violate its preconditions."""


class ConfigurationError(ValueError):
    """An experiment configuration is invalid or infeasible.

    `field` carries the dotted config key that failed validation, when known.
    """

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class FormatError(ValueError):
    """A data file is malformed. `offset` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or parameter value."""

    def __init__(self, message: str, round_index: int | None = None, step: int | None = None):
        self.round_index = round_index
        self.step = step
        ctx = []
        if round_index is not None:
            ctx.append(f"round {round_index}")
        if step is not None:
            ctx.append(f"step {step}")
        if ctx:
            message = f"{message} ({', '.join(ctx)})"
        super().__init__(message)


class AttackInapplicableError(RuntimeError):
    """The configured attack cannot be fabricated in the current round."""
