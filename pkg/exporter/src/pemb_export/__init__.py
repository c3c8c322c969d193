"""Bridge from trained encoders to PEMB embedding files."""

from .export import (
    DimMismatch,
    ExportError,
    ExportManifest,
    ExportReport,
    ModelLoadError,
    export_embeddings,
    resolve_model,
)

__version__ = "0.1.0"
