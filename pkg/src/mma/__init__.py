"""Multi-scale mixed attention point-cloud network with a synthetic weak-label harness."""

__version__ = "0.1.0"
