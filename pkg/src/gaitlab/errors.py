"""Exception hierarchy. Every error carries a stable machine-readable code
(`.code`) that the CLI maps to exit codes."""


class GaitLabError(Exception):
    code = "Error"

    def __init__(self, message=""):
        super().__init__(message or self.code)


# -- input / contract errors (CLI exit 2) --

class SequenceTooShort(GaitLabError):
    code = "SequenceTooShort"


class EmptyTarget(GaitLabError):
    code = "EmptyTarget"


class EmptyDataset(GaitLabError):
    code = "EmptyDataset"


class BadGeometry(GaitLabError):
    code = "BadGeometry"


class MissingContext(GaitLabError):
    code = "MissingContext"


class ShapeError(GaitLabError):
    code = "ShapeError"


class HeadConfigError(GaitLabError):
    code = "HeadConfigError"


class EmptyBatch(GaitLabError):
    code = "EmptyBatch"


class ConfigError(GaitLabError):
    code = "ConfigError"


class SequenceLengthError(GaitLabError):
    code = "SequenceLengthError"


class NoValidTriplets(GaitLabError):
    code = "NoValidTriplets"


class NonFiniteGradient(GaitLabError):
    code = "NonFiniteGradient"


class InsufficientIdentities(GaitLabError):
    code = "InsufficientIdentities"


class EmptyGallery(GaitLabError):
    code = "EmptyGallery"


class OpenSetProbe(GaitLabError):
    code = "OpenSetProbe"


class ConfoundInfeasible(GaitLabError):
    code = "ConfoundInfeasible"


# -- data degeneracy (CLI exit 3) --

class DegenerateStats(GaitLabError):
    code = "DegenerateStats"


class DegenerateHeight(GaitLabError):
    code = "DegenerateHeight"


class DegenerateEmbedding(GaitLabError):
    code = "DegenerateEmbedding"


DEGENERACY_ERRORS = (DegenerateStats, DegenerateHeight, DegenerateEmbedding)
