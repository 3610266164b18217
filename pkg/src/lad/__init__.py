"""Label assignment distillation for dense object detectors, at desk scale."""

__version__ = "0.1.0"
