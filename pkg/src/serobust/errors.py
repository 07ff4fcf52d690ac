"""Exception types shared across the package.

Every error carries enough context in its message to name the offending
record, file, or tensor; callers should not need to re-derive it.
"""


class SerobustError(Exception):
    """Base class for all package-specific errors."""


# -- corpus / manifests -------------------------------------------------------

class ManifestError(SerobustError):
    pass


class MissingField(ManifestError):
    pass


class DuplicateId(ManifestError):
    pass


class MissingAudio(ManifestError):
    pass


class BadSampleRate(ManifestError):
    pass


class UnmappedLabel(ManifestError):
    pass


class BadSessionStructure(ManifestError):
    pass


class LabelSetMismatch(ManifestError):
    pass


# -- features -----------------------------------------------------------------

class TooShort(SerobustError):
    pass


class StaleCache(SerobustError):
    pass


class EmptyTrainSet(SerobustError):
    pass


# -- augmentation -------------------------------------------------------------

class BatchTooSmall(SerobustError):
    pass


class BadFactor(SerobustError):
    pass


class SilentNoise(SerobustError):
    pass


# -- network ------------------------------------------------------------------

class BadConfig(SerobustError):
    pass


class ShapeMismatch(SerobustError):
    pass


class NonFiniteActivation(SerobustError):
    pass


class NonFiniteLoss(SerobustError):
    pass


class NonFiniteGradient(SerobustError):
    pass


class ConfigMismatch(SerobustError):
    """Checkpoint config hash does not match the requested config."""


# -- training -----------------------------------------------------------------

class DivergedTraining(SerobustError):
    pass


# -- evaluation ---------------------------------------------------------------

class EmptyList(SerobustError):
    pass


class MissingClass(SerobustError):
    pass
