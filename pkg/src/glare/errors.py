"""Exception types shared across the package."""


class GlareError(Exception):
    """Base class for all package-specific failures."""


class NumericFault(GlareError):
    """Raised when a forward pass or loss produces non-finite values.

    CLI entry points translate this into exit code 2.
    """

    def __init__(self, message, *, block=None, term=None):
        super().__init__(message)
        self.block = block
        self.term = term


class CheckpointError(GlareError):
    """Raised for unreadable, tampered, or version-incompatible checkpoints."""
