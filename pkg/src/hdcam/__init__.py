"""HDCAM: hierarchical depth-wise convolution + attention for sparse sEMG gesture recognition."""

__version__ = "0.1.0"
