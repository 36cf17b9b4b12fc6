"""Exception types raised by the mediator toolkit.

Every domain error derives from :class:`MediatorError`.  The CLI maps the
I/O-flavoured subset (bad files, digest failures) to exit code 3 and the
rest to exit code 2.
"""


class MediatorError(Exception):
    """Base class for all toolkit errors."""


# --- container / bundle I/O -------------------------------------------------


class IoFailure(MediatorError):
    """Filesystem operation failed or a path precondition was violated."""


class MalformedContainer(MediatorError):
    """A tensor container file violates the format contract."""


class UnsupportedDtype(MediatorError):
    """A stored dtype is outside the supported set."""


class DigestMismatch(MediatorError):
    """A bundle file's content hash does not match its manifest entry."""


class UnknownFormatVersion(MediatorError):
    """The bundle manifest declares a format version we do not know."""


# --- structural validation --------------------------------------------------


class ShapeMismatch(MediatorError):
    """Tensors that must share a shape do not."""


class NameSetMismatch(MediatorError):
    """Two checkpoints do not contain the same tensor names."""


class InconsistentExpertSet(MediatorError):
    """An expert checkpoint is missing tensors that its peers provide."""


class AmbiguousRule(MediatorError):
    """Two partition rules assign different layer indices to one tensor."""


class NonContiguousLayers(MediatorError):
    """Discovered layer indices do not form a contiguous 0..L-1 range."""


class MissingLayerInReport(MediatorError):
    """A layer present in the layer map has no conflict measurement."""


# --- numeric preconditions --------------------------------------------------


class EmptyTensor(MediatorError):
    """An operation requiring at least one element received none."""


class InvalidRatio(MediatorError):
    """A keep ratio is outside (0, 1]."""


class FewerThanTwoExperts(MediatorError):
    """Conflict measurement needs at least two experts."""


class TooFewLayers(MediatorError):
    """Fitting the layer-conflict distribution needs at least two layers."""


# --- routing ----------------------------------------------------------------


class NonPositiveBeta(MediatorError):
    """Temperature must be strictly positive."""


class InvalidK(MediatorError):
    """Top-k size is outside [1, n_tasks]."""


class DimensionMismatch(MediatorError):
    """Feature/label dimensions are inconsistent."""


class DegenerateLabels(MediatorError):
    """Classifier training needs at least two distinct labels."""


class UnknownTask(MediatorError):
    """Routing weights reference a task absent from the bundle manifest."""
