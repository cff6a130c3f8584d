"""Exception hierarchy shared across the pipeline.

The CLI maps the three top-level families onto exit codes 2, 3 and 4.
"""


class SibowError(Exception):
    pass


class ConfigError(SibowError):
    pass


class DataError(SibowError):
    pass


class NumericalError(SibowError):
    pass


class PgmError(DataError):
    """Malformed PGM stream. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class PgmHeaderError(PgmError):
    pass


class PgmTruncatedError(PgmError):
    pass


class PgmMagicError(PgmError):
    pass


class ImageTooSmallError(DataError):
    pass


class DescriptorParseError(DataError):
    def __init__(self, message, line):
        super().__init__(f"line {line}: {message}")
        self.line = line


class KeypointMarginError(SibowError):
    """Descriptor sampling grid leaves the image; the keypoint is skipped."""


class EmptyPoolError(DataError):
    pass


class ClusteringError(DataError):
    pass


class DimensionMismatchError(DataError):
    pass


class SingularSystemError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    def __init__(self, message, kkt_violation):
        super().__init__(f"{message} (final KKT violation {kkt_violation:.3g})")
        self.kkt_violation = kkt_violation


class CompatibilityError(DataError):
    """Features and model were produced under different pooling/codebook."""
