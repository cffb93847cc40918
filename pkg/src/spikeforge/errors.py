"""Exception types shared across the toolkit."""


class SpikeforgeError(Exception):
    """Base class for all toolkit errors."""


class GraphError(SpikeforgeError):
    """Structural problem in a network graph."""


class UnsupportedTopologyError(GraphError):
    """Graph contains a construct a rewrite or engine cannot handle."""


class UnfoldedBatchNormError(GraphError):
    """A BatchNorm node reached an engine that requires folding first."""


class StaleStateError(SpikeforgeError):
    """Spiking state was reused without a reset in between."""


class CalibrationDivergedError(SpikeforgeError):
    """Weight calibration produced a non-finite loss; parameters restored."""


class ModelFormatError(SpikeforgeError):
    """Base class for serialization errors (SFM/SFT/SFB files)."""


class BadMagicError(ModelFormatError):
    """File does not start with the expected magic bytes."""


class VersionMismatchError(ModelFormatError):
    """File declares a format version this build does not understand."""


class TruncatedFileError(ModelFormatError):
    """File ends before the declared payload is complete."""


class BlobSizeMismatchError(ModelFormatError):
    """Manifest-declared tensor sizes disagree with the stored blob."""


class ManifestError(ModelFormatError):
    """Manifest JSON is malformed or self-inconsistent."""
