"""Exception hierarchy shared across the package.

Every error raised deliberately by ctquant derives from CtQuantError so the
CLI can map error classes to stable exit codes.
"""


class CtQuantError(Exception):
    """Base class for all ctquant errors."""

    exit_code = 1


# --- file format / io -------------------------------------------------------

class MissingFile(CtQuantError):
    exit_code = 10


class MalformedHeader(CtQuantError):
    exit_code = 11


class ChecksumMismatch(CtQuantError):
    exit_code = 12


class SizeMismatch(CtQuantError):
    exit_code = 13


class IoFailure(CtQuantError):
    exit_code = 14


class IllegalLabel(CtQuantError):
    exit_code = 15


# --- geometry / biomarkers --------------------------------------------------

class SchemaMismatch(CtQuantError):
    exit_code = 20


class DimsMismatch(CtQuantError):
    exit_code = 21


class EmptyMask(CtQuantError):
    exit_code = 22


class MultipleComponents(CtQuantError):
    exit_code = 23


class DegenerateShape(CtQuantError):
    exit_code = 24


class TooFewPoints(CtQuantError):
    exit_code = 25


class DegenerateConic(CtQuantError):
    exit_code = 26


class OutOfBounds(CtQuantError):
    exit_code = 27


# --- records / features -----------------------------------------------------

class ArityMismatch(CtQuantError):
    exit_code = 30


class NonFiniteValue(CtQuantError):
    exit_code = 31


class DuplicateScanId(CtQuantError):
    exit_code = 32


class TooFewRecords(CtQuantError):
    exit_code = 33


# --- tensor / model ---------------------------------------------------------

class ShapeMismatch(CtQuantError):
    exit_code = 40


class NonFinite(CtQuantError):
    exit_code = 41


class NotScalarLoss(CtQuantError):
    exit_code = 42


class VersionMismatch(CtQuantError):
    exit_code = 43


class HashMismatch(CtQuantError):
    exit_code = 44


# --- evaluation -------------------------------------------------------------

class NoPositives(CtQuantError):
    exit_code = 50
