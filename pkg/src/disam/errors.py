"""Exception types shared across the package."""


class DisamError(Exception):
    """Base class for all package errors."""


class ValidationError(DisamError, ValueError):
    """Bad user input: files, flags, shapes or configuration."""


class ShapeMismatch(ValidationError):
    pass


class InvalidConfig(ValidationError):
    pass


class ManifestError(ValidationError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MalformedRecord(ManifestError):
    pass


class DuplicateId(ManifestError):
    pass


class MissingPoseForDatabase(ManifestError):
    pass


class UnknownDomain(ManifestError):
    pass


class CheckpointError(DisamError):
    pass


class VersionMismatch(CheckpointError):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


class EmptyCandidates(ValidationError):
    pass


class EmptyPool(ValidationError):
    pass


class NonpositiveMargin(ValidationError):
    pass


class TooFewDomains(ValidationError):
    pass


class NanLoss(DisamError, FloatingPointError):
    def __init__(self, term, value):
        self.term = term
        self.value = value
        super().__init__(f"non-finite loss term {term!r} = {value}")


class MissingPose(ValidationError):
    pass


class EmptyDatabase(ValidationError):
    pass


class CorruptDatabase(ValidationError):
    pass


class FingerprintMismatch(UserWarning):
    """Feature database was built by a different model than the one in use."""


class FingerprintMismatchError(DisamError):
    pass


class NonUnitQuaternion(ValidationError):
    pass


class MissingGroundTruth(ValidationError):
    pass


class MissingPlaceLabel(ValidationError):
    pass


class FlagConflict(ValidationError):
    pass
