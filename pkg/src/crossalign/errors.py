"""Exception types that map onto the CLI exit codes."""


class DataError(Exception):
    """A dataset, checkpoint, or report file is missing, malformed, or inconsistent."""


class NumericError(Exception):
    """A numeric failure during training or evaluation (non-finite gradients, etc.)."""
