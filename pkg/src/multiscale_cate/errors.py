"""Exception hierarchy.

The CLI maps these onto exit codes: ConfigError -> 1 (usage), DataError -> 2,
NumericalError -> 3. Library code raises the most specific class and puts the
offending field, row, or offset into the message.
"""


class MscateError(Exception):
    """Base class for all package errors."""


class ConfigError(MscateError):
    """Invalid configuration or unusable parameter combination."""


class DataError(MscateError):
    """Malformed, inconsistent, or out-of-contract input data."""


class NumericalError(MscateError):
    """A computation produced non-finite or otherwise unusable numbers."""


# data_model

class MalformedHeader(DataError):
    pass


class SizeMismatch(DataError):
    pass


class NonFiniteValue(DataError):
    pass


class DuplicateId(DataError):
    pass


class NonBinaryTreatment(DataError):
    pass


class UnparsableRow(DataError):
    pass


class DimMismatch(DataError):
    pass


class UnknownUnitId(DataError):
    pass


# imaging

class OutOfBounds(DataError):
    pass


class NoValidCenter(DataError):
    pass


class MaskTooLarge(DataError):
    pass


# embedding

class MissingEmbedding(DataError):
    pass


class ScaleTagMismatch(DataError):
    pass


class NoPairs(DataError):
    pass


# estimation

class SingleArm(DataError):
    pass


class TooFewUnits(DataError):
    pass


# simulation

class UnknownFlagCombination(DataError):
    pass


class NonFiniteLoss(NumericalError):
    pass


# experiment

class RequiresRawRepresentations(ConfigError):
    pass


class BlocksDontCover(ConfigError):
    pass
