"""Late fusion of expert predictions for long-tail classification."""

__version__ = "0.1.0"
