"""Semi-supervised binary segmentation with online augmentation and multi-decoder consistency."""

__version__ = "0.1.0"
PROTOCOL_VERSION = "1.0"
