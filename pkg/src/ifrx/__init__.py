"""Influence analysis and influence-guided fine-tuning of a toy neural OFDM receiver."""

__version__ = "0.1.0"
