"""Zero-shot pose transfer onto unrigged stylized 3D characters."""

__version__ = "0.1.0"
