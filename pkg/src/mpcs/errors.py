"""Exception hierarchy shared by every stage of the pipeline."""


class MPCSError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(MPCSError):
    """Invalid or unresolvable configuration (CLI exit code 2)."""


# dataset
class MissingMagnification(MPCSError):
    pass


class EmptyDataset(MPCSError):
    pass


class UnreadableImage(MPCSError):
    pass


class InvalidBalance(MPCSError):
    pass


class PatchTooLarge(MPCSError):
    pass


class TooFewPatients(MPCSError):
    pass


class FractionOutOfRange(MPCSError):
    pass


# sampler
class IncompleteSample(MPCSError):
    pass


# transforms
class DegenerateImage(MPCSError):
    pass


# model
class ShapeMismatch(MPCSError):
    pass


class UnknownEncoder(MPCSError):
    pass


# loss
class ZeroVector(MPCSError):
    """An embedding with zero norm reached the cosine similarity."""


class DegenerateBatch(MPCSError):
    pass


# train
class CollapseDetected(MPCSError):
    pass


class EmptyLabelSubset(MPCSError):
    pass


# eval
class EmptyPredictions(MPCSError):
    pass


class NoPatches(MPCSError):
    pass


class IncompleteMatrix(MPCSError):
    pass


# report
class LayerNotFound(MPCSError):
    pass


class NonSpatialLayer(MPCSError):
    pass


class SchemaMismatch(MPCSError):
    pass
