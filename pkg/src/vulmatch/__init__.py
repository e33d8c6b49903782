"""Fine-grained binary vulnerability signatures: build them from patch pairs, match them in stripped binaries."""

__version__ = "0.1.0"
