"""Exception hierarchy shared across the package.

Every error the public surface can raise is a subclass of ``DsanetError``,
so callers (notably the CLI) can map failures onto stable exit codes:
config/validation problems, file problems, and numerical problems are
distinct branches.
"""


class DsanetError(Exception):
    """Base class for all package-specific errors."""


# --- configuration / validation ------------------------------------------


class ValidationError(DsanetError):
    """Bad inputs or configuration (CLI exit code 2)."""


class SchemaViolation(ValidationError):
    """Manifest or config file violates the documented schema."""


class InconsistentLabel(ValidationError):
    """Binary label and category label disagree (y=0 <=> category=0)."""


class KOutOfRange(ValidationError):
    """Top-k pooling asked for k outside [1, N]."""


class MOutOfRange(ValidationError):
    """Candidate selection asked for M outside [1, N]."""


class BetaOutOfRange(ValidationError):
    """Belief-modulation temperature ratio must be > 0."""


class EmptyClassName(ValidationError):
    """Class names must contain at least one byte."""


class LengthMismatch(ValidationError):
    """Two score tracks of different lengths were combined."""


class ShapeMismatch(ValidationError):
    """Operand shapes do not conform for the requested operation."""


class SingleClassOnly(ValidationError):
    """AUC needs both a positive and a negative frame."""


class NoPositives(ValidationError):
    """Average precision needs at least one positive frame."""


# --- file I/O --------------------------------------------------------------


class IoError(DsanetError):
    """File-level failures (CLI exit code 3)."""


class MissingFile(IoError):
    """A referenced file does not exist."""


class BadMagic(IoError):
    """Binary file lacks the expected magic bytes or version."""


class DimensionMismatch(IoError):
    """Binary header dimensions disagree with the payload size."""


class NonFiniteEntry(IoError):
    """A loaded payload contains NaN or infinity."""


class IoFailure(IoError):
    """Generic read/write failure (permissions, truncation, ...)."""


# --- numerics --------------------------------------------------------------


class NumericalError(DsanetError):
    """Numerical failures (CLI exit code 4)."""


class NonFiniteResult(NumericalError):
    """A forward operation produced NaN or infinity."""


class NonFiniteLoss(NumericalError):
    """A training loss term became NaN or infinity; names the term."""


class NonScalarLoss(NumericalError):
    """backward() was called on a non-scalar tensor."""


class ZeroVector(NumericalError):
    """Cosine similarity / normalization of a zero-norm vector."""
