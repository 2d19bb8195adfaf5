"""Exception types raised across the package."""


class HTCError(Exception):
    """Base class for all package errors."""


class TaxonomyError(HTCError, ValueError):
    pass


class CycleDetected(TaxonomyError):
    pass


class MultipleParents(TaxonomyError):
    pass


class OrphanLabel(TaxonomyError):
    pass


class EmptyTaxonomy(TaxonomyError):
    pass


class InvalidIndex(HTCError, IndexError):
    pass


class EmptyCorpus(HTCError, ValueError):
    pass


class EmptyDataset(HTCError, ValueError):
    pass


class UnknownLabel(HTCError, KeyError):
    pass


class MalformedRecord(HTCError, ValueError):
    def __init__(self, line_number, reason):
        super().__init__(f"line {line_number}: {reason}")
        self.line_number = line_number


class InvalidConfig(HTCError, ValueError):
    pass


class ShapeMismatch(HTCError, ValueError):
    pass


class HierarchyMismatch(HTCError, ValueError):
    pass


class InvalidTemperature(HTCError, ValueError):
    pass


class EmptyLabelSet(HTCError, ValueError):
    pass


class ZeroNormVector(HTCError, ValueError):
    pass


class InvalidEpsilon(HTCError, ValueError):
    pass


class NonFiniteLoss(HTCError, FloatingPointError):
    pass


class NonFiniteGradient(HTCError, FloatingPointError):
    pass


class IncompatibleCheckpoint(HTCError, ValueError):
    pass
