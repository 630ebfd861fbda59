"""Researcher interest profiles from PubMed metadata, with an evaluation battery."""

__version__ = "0.1.0"
