"""Exception hierarchy.

``DataError`` subclasses describe problems with the *content* of the input
(blank images, single-stain patches, bad configs); the CLI maps them to
exit code 2.
"""


class CasaError(Exception):
    """Base class for every error raised by this package."""


class DataError(CasaError, ValueError):
    """Input data cannot be processed as requested."""


class NoTissue(DataError):
    pass


class DegenerateStains(DataError):
    pass


class SingularSystem(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class DegenerateMean(DataError):
    pass


class EmptyMap(DataError):
    pass


class EmptyInput(DataError):
    pass


class EmptyGroup(DataError):
    pass


class InvalidBeta(DataError):
    pass


class InvalidConfig(DataError):
    pass


class InvalidStainMatrix(DataError):
    pass


class NullColumn(DataError):
    pass


class Antipodal(DataError):
    pass


class InvalidCheckpoint(DataError):
    pass
