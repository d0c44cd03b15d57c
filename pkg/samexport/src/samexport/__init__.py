"""Mask exporter: segment an image and write the mask-manifest layout."""

from .export import ExportError, ExportJob, export_masks

__all__ = ["ExportError", "ExportJob", "export_masks"]
__version__ = "0.1.0"
