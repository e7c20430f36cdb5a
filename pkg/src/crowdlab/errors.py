"""Exception hierarchy shared by every crowdlab module.

Each error carries a short machine-readable ``code`` so the CLI can print a
single parsable line before the human message.
"""


class CrowdLabError(Exception):
    code = "ERROR"


# dataset_io
class MissingFile(CrowdLabError, FileNotFoundError):
    code = "MISSING_FILE"


class MalformedManifest(CrowdLabError, ValueError):
    code = "MALFORMED_MANIFEST"


class OutOfBoundsPoint(CrowdLabError, ValueError):
    code = "OUT_OF_BOUNDS_POINT"


class BadMagic(CrowdLabError, ValueError):
    code = "BAD_MAGIC"


class TruncatedPayload(CrowdLabError, ValueError):
    code = "TRUNCATED_PAYLOAD"


class DuplicateName(CrowdLabError, ValueError):
    code = "DUPLICATE_NAME"


# density
class NonPositiveSigma(CrowdLabError, ValueError):
    code = "NON_POSITIVE_SIGMA"


class NonDivisibleShape(CrowdLabError, ValueError):
    code = "NON_DIVISIBLE_SHAPE"


# augment
class ImageTooSmall(CrowdLabError, ValueError):
    code = "IMAGE_TOO_SMALL"


class NonSquareCrop(CrowdLabError, ValueError):
    code = "NON_SQUARE_CROP"


class BadPixelRange(CrowdLabError, ValueError):
    code = "BAD_PIXEL_RANGE"


# networks
class InvalidConfig(CrowdLabError, ValueError):
    code = "INVALID_CONFIG"


class ShapeError(CrowdLabError, ValueError):
    code = "SHAPE_ERROR"


class ShapeMismatch(CrowdLabError, ValueError):
    code = "SHAPE_MISMATCH"


class NonFiniteLoss(CrowdLabError, FloatingPointError):
    code = "NON_FINITE_LOSS"


class MissingCheckpoint(CrowdLabError, FileNotFoundError):
    code = "MISSING_CHECKPOINT"


class TooFewFrames(CrowdLabError, ValueError):
    code = "TOO_FEW_FRAMES"


# optimal transport
class NonConvergence(CrowdLabError, RuntimeError):
    code = "NON_CONVERGENCE"


class DimensionMismatch(CrowdLabError, ValueError):
    code = "DIMENSION_MISMATCH"


class BadSpec(CrowdLabError, ValueError):
    code = "BAD_SPEC"


class DegenerateBatch(CrowdLabError, ValueError):
    code = "DEGENERATE_BATCH"


class ZeroPrediction(CrowdLabError, ValueError):
    code = "ZERO_PREDICTION"


# video
class EmptyClip(CrowdLabError, ValueError):
    code = "EMPTY_CLIP"


class MissingFps(CrowdLabError, ValueError):
    code = "MISSING_FPS"


class MissingDirectory(CrowdLabError, FileNotFoundError):
    code = "MISSING_DIRECTORY"


class DecodeFailure(CrowdLabError, RuntimeError):
    code = "DECODE_FAILURE"


class EmptyDataset(CrowdLabError, ValueError):
    code = "EMPTY_DATASET"


# metrics
class EmptyInput(CrowdLabError, ValueError):
    code = "EMPTY_INPUT"


class LengthMismatch(CrowdLabError, ValueError):
    code = "LENGTH_MISMATCH"


# cli
class MissingLogs(CrowdLabError, FileNotFoundError):
    code = "MISSING_LOGS"
