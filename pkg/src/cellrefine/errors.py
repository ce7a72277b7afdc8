"""Exception hierarchy shared by every cellrefine module."""


class CellRefineError(Exception):
    """Base class; the CLI maps these to exit code 1."""


class ConfigError(CellRefineError):
    """Invalid or unparsable configuration (CLI exit code 2)."""


class InvalidConfig(ConfigError):
    pass


class UnknownCellType(CellRefineError):
    pass


class InsufficientMarkers(CellRefineError):
    pass


class InvalidOntology(CellRefineError):
    pass


class UnknownGene(CellRefineError):
    pass


class LengthMismatch(CellRefineError):
    pass


class AllZeroExpression(CellRefineError):
    pass


class RateOutOfRange(CellRefineError):
    pass


class SequenceTooLong(CellRefineError):
    pass


class AdaptersAlreadyAttached(CellRefineError):
    pass


class ZeroVector(CellRefineError):
    pass


class MissingPrototype(CellRefineError):
    pass


class EmptyMaskSet(CellRefineError):
    pass


class NonFiniteInput(CellRefineError):
    pass


class EmptyDataset(CellRefineError):
    pass


class IncompatibleTask(CellRefineError):
    pass


class StageOrderViolation(CellRefineError):
    pass


class KOutOfRange(CellRefineError):
    pass


class DegenerateCell(CellRefineError):
    pass


class DegenerateGroup(CellRefineError):
    pass


class LabelSpaceMismatch(CellRefineError):
    pass


class TooFewCategories(CellRefineError):
    pass
