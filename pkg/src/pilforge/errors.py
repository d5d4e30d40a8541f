class PilforgeError(Exception):
    pass


class ParseError(PilforgeError):
    """Malformed input data. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(PilforgeError, FloatingPointError):
    """A non-finite value showed up in a training or fitting loop."""

    def __init__(self, message: str, step: int | None = None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step
