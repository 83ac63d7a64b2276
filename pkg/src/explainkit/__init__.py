"""Joint predict-and-explain training and evaluation toolkit."""

__version__ = "0.1.0"
