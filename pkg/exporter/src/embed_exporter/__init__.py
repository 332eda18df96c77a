"""Dump contextual token embeddings into UHDE files.

Runs a pretrained bidirectional transformer over a TSV of texts and
writes the hidden states of selected layers, one record per text, in
the binary format the retrieval engine reads.
"""

from embed_exporter.core import (
    DEFAULT_LAYERS,
    ExporterError,
    ExportError,
    ExportJob,
    VerifyError,
    VerifyReport,
    export,
    verify,
)

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_LAYERS",
    "ExporterError",
    "ExportError",
    "ExportJob",
    "VerifyError",
    "VerifyReport",
    "export",
    "verify",
    "__version__",
]
