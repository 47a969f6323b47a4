"""Few-shot 3D head-surface reconstruction with a learned shape-and-appearance prior."""

__version__ = "0.1.0"
