"""Exception types shared across pathsegkit modules."""


class PathsegkitError(Exception):
    """Base class for all pathsegkit errors."""


# taxonomy
class MalformedLabel(PathsegkitError):
    """Label string does not have the three-level region-structure-object form."""


class UnknownStructure(PathsegkitError):
    """Middle label level is not one of tissue/cell/nuclei."""


class EmptyLabelSet(PathsegkitError):
    """An operation over labels received an empty list."""


# pipeline
class NonPositiveMagnification(PathsegkitError):
    """Source or target magnification must be > 0."""


class ZeroOutputDimension(PathsegkitError):
    """Rescaling would produce a zero-sized image."""


class GridMismatch(PathsegkitError):
    """Patch grid does not cover the image dimensions it is applied to."""


class EmptyPatch(PathsegkitError):
    """A patch with zero pixels cannot be standardized."""


class EmptyManifest(PathsegkitError):
    """A dataset manifest with no entries."""


# metrics / masks
class DimensionMismatch(PathsegkitError):
    """Two arrays that must share dimensions do not."""


class EmptyMask(PathsegkitError):
    """A mask with no foreground where foreground is required."""


class EmptyScores(PathsegkitError):
    """Bootstrap over an empty score list."""


class BadEdges(PathsegkitError):
    """Bin edges are not strictly increasing or too few."""


# boxes
class OutOfBounds(PathsegkitError):
    """Box coordinates fall outside the target image."""


class EmptyRecords(PathsegkitError):
    """Prompt-efficiency aggregation over an empty record list."""


# model
class IndivisibleDims(PathsegkitError):
    """Image dimensions are not divisible by the encoder patch size."""


class UnknownToken(PathsegkitError):
    """Prompt token missing from the model vocabulary."""


class ShapeMismatch(PathsegkitError):
    """Operand shapes inconsistent with the layer contract."""


class ZeroVector(PathsegkitError):
    """Cosine similarity is undefined for a zero vector."""


class DivergedLoss(PathsegkitError):
    """Training loss became NaN or infinite."""


# explain
class MissingObjectMasks(PathsegkitError):
    """A slide lacks masks for one or more required objects."""


# cli
class MissingPrediction(PathsegkitError):
    """A ground-truth entry has no paired prediction."""


class ConfigError(PathsegkitError):
    """Run configuration failed schema validation."""
