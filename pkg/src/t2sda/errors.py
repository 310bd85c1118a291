"""Exception and warning types shared across the package."""


class T2SError(Exception):
    """Base class for all package errors."""


class ConfigInvalid(T2SError):
    pass


class IoError(T2SError):
    pass


class FormatError(T2SError):
    pass


class ShapeMismatch(T2SError):
    pass


class SpectralResidue(T2SError):
    """Inverse transform of a supposedly real spectrum left imaginary residue."""


class EmptyInput(T2SError):
    pass


class EmptyBatch(T2SError):
    pass


class GraphNotRecorded(T2SError):
    pass


class NonFiniteGradient(T2SError):
    pass


class NoSourceNegatives(T2SError):
    """The source negative pool for a class is empty (single-class batch)."""


class NoActiveClasses(T2SError):
    pass


class AllIgnored(T2SError):
    pass


class ClassMissing(T2SError):
    pass


class EmptyMatrix(T2SError):
    pass


class DegenerateVectorWarning(UserWarning):
    """Normalizing a (near-)zero vector."""


class DegeneratePairWarning(UserWarning):
    """Two class centers coincide in a ratio metric."""


class NegativeDenominatorWarning(UserWarning):
    """PDD denominator is negative; value reported as-is."""
