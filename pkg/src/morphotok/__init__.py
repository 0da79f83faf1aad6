"""Self-organizing tokenization: boundary and embedding morphogenesis."""

__version__ = "0.1.0"
