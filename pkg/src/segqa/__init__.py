"""segqa: desk-scale segmentation QA and continuous-improvement harness."""

__version__ = "0.1.0"
