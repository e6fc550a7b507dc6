"""Forward-only continual test-time adaptation for quantized networks."""

__version__ = "0.1.0"
