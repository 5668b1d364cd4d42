"""Audit toolkit for discrimination in binary release/detain decisions
with selectively observed outcomes."""

__version__ = "0.1.0"
