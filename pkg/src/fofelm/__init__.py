"""FOFE feedforward language models for multi-dialect modeling with adapters."""

__version__ = "0.1.0"
