"""Fixed-threshold robustness evaluation for AI-generated-image detectors."""

__version__ = "0.1.0"
