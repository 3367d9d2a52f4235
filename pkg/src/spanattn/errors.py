"""Exception types raised across the library.

Grouped by the subsystem that raises them; everything derives from
:class:`SpanAttnError` so callers can catch broadly.
"""


class SpanAttnError(Exception):
    """Base class for all library errors."""


# --- tensor engine ---------------------------------------------------------

class ShapeMismatch(SpanAttnError):
    """Operand shapes are incompatible for the requested operation."""


class DivisionByZero(SpanAttnError):
    """Elementwise division hit an exact zero in the denominator."""


class EvenKernel(SpanAttnError):
    """Spatial kernel size must be odd."""


class NonPositiveStride(SpanAttnError):
    """Stride must be a positive integer."""


class DegenerateBatch(SpanAttnError):
    """Batch statistics are undefined (fewer than 2 elements per channel)."""


class AllMaskedWithoutEpsilon(SpanAttnError):
    """Masked softmax has an all-zero mask and no epsilon guard."""


class NonScalarLoss(SpanAttnError):
    """backward() requires a scalar loss tensor."""


class StaleTape(SpanAttnError):
    """backward() called without a fresh forward pass on the tape."""


class NonDeterministicFunction(SpanAttnError):
    """Gradient check target produced different values on repeated evaluation."""


class MissingGradient(SpanAttnError):
    """Optimizer step found a parameter with no populated gradient."""


# --- adaptive mask ---------------------------------------------------------

class EmptySpanList(SpanAttnError):
    """kernel_extent needs at least one span value."""


class EvenExtent(SpanAttnError):
    """Mask grids are defined on odd extents only."""


class ExtentTooSmall(SpanAttnError):
    """Shared kernel extent does not cover a head's mask support."""


# --- local attention -------------------------------------------------------

class ExtentExceedsTable(SpanAttnError):
    """Requested kernel extent is larger than the embedding table."""


class ChannelMismatch(SpanAttnError):
    """Input channel count does not match the layer configuration."""


# --- models ----------------------------------------------------------------

class InvalidChannelPlan(SpanAttnError):
    """Model channel plan is malformed."""


class NotAdaptiveModel(SpanAttnError):
    """Span reporting requested on a model without adaptive attention."""


class ConfigMismatch(SpanAttnError):
    """Checkpoint manifest disagrees with the requested configuration."""


# --- data pipeline ---------------------------------------------------------

class MissingFile(SpanAttnError):
    """Expected dataset file is absent."""


class TruncatedRecord(SpanAttnError):
    """Dataset file length is not a whole number of records."""


class LabelOutOfRange(SpanAttnError):
    """Decoded label falls outside the valid class range."""


class FractionOutOfRange(SpanAttnError):
    """Training fraction must lie in (0, 1]."""


# --- training --------------------------------------------------------------

class EpochOutOfRange(SpanAttnError):
    """Schedule queried outside [0, epochs)."""


class NonFiniteLoss(SpanAttnError):
    """Training loss became NaN or infinite."""


# --- analysis / cli --------------------------------------------------------

class MissingRun(SpanAttnError):
    """Plot export called with no completed runs."""


class ConflictingFlags(SpanAttnError):
    """Mutually exclusive command-line flags were combined."""
