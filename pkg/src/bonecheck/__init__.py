"""Desk-scale musculoskeletal radiograph abnormality pipeline."""

__version__ = "0.1.0"
