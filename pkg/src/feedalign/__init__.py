"""Training with back-propagation, feedback alignment and direct feedback alignment."""

__version__ = "0.1.0"
