class ContractError(ValueError):
    """A caller broke a documented pre-condition (shape, range, size)."""


class NumericalError(ArithmeticError):
    def __init__(self, message, where=None, step=None):
        super().__init__(message)
        self.where = where
        self.step = step


class FormatError(ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ProtocolError(ValueError):
    pass


class CheckpointMismatchError(ValueError):
    def __init__(self, message, diff=None):
        self.diff = dict(diff or {})
        if self.diff:
            lines = [
                f"  {key}: expected {expected!r}, found {found!r}"
                for key, (expected, found) in sorted(self.diff.items())
            ]
            message = message + "\n" + "\n".join(lines)
        super().__init__(message)
