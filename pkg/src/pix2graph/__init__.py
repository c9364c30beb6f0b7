"""Image-to-graph transformation and graph-level anomaly detection."""

from pix2graph.errors import TrainingError, ValidationError

__version__ = "0.1.0"

__all__ = ["TrainingError", "ValidationError", "__version__"]
