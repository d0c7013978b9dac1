"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(RuntimeError):
    """An internal calling contract was violated (missing grad, bad phase input)."""


class DegenerateInputError(ValueError):
    """Numerically degenerate input, e.g. a zero-norm vector fed to cosine."""


class ConfigError(ValueError):
    """Invalid experiment configuration; message carries the offending key path."""


class CheckpointFormatError(ValueError):
    """Checkpoint container is corrupt or has the wrong magic/version."""


class ProtocolOrderError(RuntimeError):
    """Incremental-protocol phases were invoked out of order."""
