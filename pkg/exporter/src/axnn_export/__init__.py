"""Offline converter from framework-trained CNNs to the axnn manifest."""

__version__ = "0.1.0"

from .export import (ExportError, ExportReport, LayerParity,  # noqa: F401
                     UnsupportedOpsError, export)
