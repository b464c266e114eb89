"""Exception types shared across the package."""


class HoigenError(Exception):
    """Base class for all package errors."""


class DegenerateRotation(HoigenError):
    """6D rotation input cannot be orthonormalized (zero or parallel columns)."""


class NotARotation(HoigenError):
    """Matrix is not orthonormal with determinant +1 within tolerance."""


class WrongDimension(HoigenError):
    """Vector or array has the wrong length for the requested operation."""


class ShapeMismatch(HoigenError):
    """Operand shapes are inconsistent."""


class EmptyMesh(HoigenError):
    """Mesh has no faces."""


class NotWatertight(HoigenError):
    """Operation requires a watertight mesh (every edge shared by exactly 2 faces)."""


class SingularTime(HoigenError):
    """Flow time too close to the path singularity at tau = 1/(1 - sigma_min)."""


class DegenerateBatch(HoigenError):
    """Contrastive loss needs at least 2 samples."""


class LengthMismatch(HoigenError):
    """Sequences being compared have different lengths."""


class TooShort(HoigenError):
    """Sequence too short for the requested finite-difference order."""


class NotFound(HoigenError):
    """No grasp-to-manipulation transition present in the clip."""


class UntrainedClassifier(HoigenError):
    """Action classifier used before fitting."""


class InfeasibleSpec(HoigenError):
    """Synthetic task spec cannot produce a valid grasp (object/hand scale mismatch)."""


class EmptyScene(HoigenError):
    """Scene has no points."""


class FormatError(HoigenError):
    """File content violates the documented format."""
