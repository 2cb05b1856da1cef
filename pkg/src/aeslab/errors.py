"""Shared exception types."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class DimensionError(ContractError):
    """Operand shapes are incompatible for an op."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")
        self.op = op
        self.shapes = shapes


class FormatError(ValueError):
    """A file or stream does not match its expected format."""


class AlignmentError(ValueError):
    """Two token streams that must agree diverge."""


class ValidationError(ValueError):
    """Input data fails a semantic validity check."""


class ConfigError(ValueError):
    """A configuration value is out of bounds or inconsistent."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not match the loader."""
