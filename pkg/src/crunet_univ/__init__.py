"""Prompt-conditioned unrolled CRUNet reconstruction for undersampled dynamic multi-coil MRI."""

__version__ = "0.1.0"
