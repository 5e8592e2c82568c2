"""Test-time task adaptation for cross-domain few-shot segmentation."""

__version__ = "0.1.0"
