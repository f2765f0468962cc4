"""Synthetic-cipher testbed for language-tag placement in multilingual NMT."""

__version__ = "0.1.0"
