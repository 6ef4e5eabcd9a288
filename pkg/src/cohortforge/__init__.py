"""Claims-data flattening, event extraction and cohort analysis."""

__version__ = "0.1.0"
