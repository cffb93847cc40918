"""Export PyTorch CNN checkpoints and datasets to SFM/SFT container files."""

from .export import ExportError, ExportManifest, export_checkpoint, export_samples
from .formats import write_sfm, write_sft

__version__ = "0.1.0"
