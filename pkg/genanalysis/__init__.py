"""Joint shape analysis over families of implicit shapes."""

__version__ = "0.1.0"
