"""Multi-modal multi-scale transformer for forgery detection, at desk scale."""

__version__ = "0.1.0"
