"""Exception hierarchy shared by all pipeline stages.

Every domain error derives from :class:`OmicsMapError`; the command line maps
those to exit code 1.
"""


class OmicsMapError(Exception):
    """Base class for domain errors."""


# hierarchy
class NetworkUnavailable(OmicsMapError):
    pass


class CacheCorrupt(OmicsMapError):
    pass


class MalformedLine(OmicsMapError):
    pass


class OrphanLine(OmicsMapError):
    pass


class MissingSubFile(OmicsMapError):
    pass


# expr
class ParseError(OmicsMapError):
    pass


class DuplicateSample(OmicsMapError):
    pass


class EmptyMatrix(OmicsMapError):
    pass


class DegenerateLibrary(OmicsMapError):
    pass


class UnknownCategory(OmicsMapError):
    pass


# treemap / render
class NonPositiveWeight(OmicsMapError):
    pass


class EmptyTree(OmicsMapError):
    pass


class MissingValue(OmicsMapError):
    pass


class OutOfRange(OmicsMapError):
    pass


class NotDivisible(OmicsMapError):
    pass


class FormatError(OmicsMapError):
    """Unreadable artifact file (bad magic, header or payload size)."""


# cnn
class ShapeMismatch(OmicsMapError):
    pass


class TraceMismatch(OmicsMapError):
    pass


class EmptyTrainingSet(OmicsMapError):
    pass


class VersionMismatch(OmicsMapError):
    pass


class ChecksumMismatch(OmicsMapError):
    pass


# attribution / eval
class InconsistentSides(OmicsMapError):
    pass


class ClassTooSmall(OmicsMapError):
    pass


class OneClassOnly(OmicsMapError):
    pass


class NonFiniteFeature(OmicsMapError):
    pass


class SelectionNotInBackground(OmicsMapError):
    pass
