"""Planetoid citation files to portable text-bundle converter."""

from .convert import ConversionError, convert, read_planetoid

__version__ = "0.1.0"
