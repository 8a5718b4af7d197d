"""Hardware-latency-aware neural architecture search toolkit."""

__version__ = "0.1.0"
