"""Exception types raised across the package.

Each operation's contract names the error it raises; keeping them as
distinct classes lets callers (and tests) catch failures precisely.
"""


class CmreidError(Exception):
    """Base class for all package errors."""


# -- corpus / data model ----------------------------------------------------

class InvalidSpec(CmreidError):
    pass


class MissingManifest(CmreidError):
    pass


class RasterLengthMismatch(CmreidError):
    def __init__(self, sample_id, kind, expected, actual):
        super().__init__(
            f"raster for sample {sample_id!r} kind {kind} has {actual} values, expected {expected}"
        )
        self.sample_id = sample_id
        self.kind = kind


class VersionMismatch(CmreidError):
    pass


# -- tokenization -----------------------------------------------------------

class BadChannelCount(CmreidError):
    pass


class DegenerateBatch(CmreidError):
    pass


class ShapeMismatch(CmreidError):
    pass


class OutOfVocabulary(CmreidError):
    def __init__(self, token_id, position):
        super().__init__(f"token id {token_id} at position {position} is outside the vocabulary")
        self.token_id = token_id
        self.position = position


# -- unified encoding -------------------------------------------------------

class DimMismatch(CmreidError):
    pass


class UnknownPolicy(CmreidError):
    pass


class HeadDivisibility(CmreidError):
    pass


class EmptySegment(CmreidError):
    pass


# -- modality synthesis -----------------------------------------------------

class NoSourceModality(CmreidError):
    pass


class ZeroVector(CmreidError):
    pass


# -- cue fusion -------------------------------------------------------------

class EmptyInput(CmreidError):
    pass


class MissingRGB(CmreidError):
    pass


# -- training ---------------------------------------------------------------

class NoPositive(CmreidError):
    def __init__(self, row):
        super().__init__(f"row {row} has no positive candidate in the batch")
        self.row = row


class InsufficientClasses(CmreidError):
    pass


class EmptyCorpus(CmreidError):
    pass


class NonFiniteLoss(CmreidError):
    def __init__(self, epoch, detail=""):
        super().__init__(f"non-finite loss at epoch {epoch}" + (f": {detail}" if detail else ""))
        self.epoch = epoch


class NonFiniteGradient(CmreidError):
    pass


# -- retrieval evaluation ---------------------------------------------------

class EmptyGallery(CmreidError):
    pass


class NoPositives(CmreidError):
    pass


class EmptyQuerySet(CmreidError):
    pass


class InvalidRecord(CmreidError):
    pass


# -- cli / persistence ------------------------------------------------------

class ConfigParse(CmreidError):
    pass


class MissingInput(CmreidError):
    pass
