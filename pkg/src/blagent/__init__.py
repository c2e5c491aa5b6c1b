"""Policy-driven Black-Litterman portfolio engine with a self-financing backtester."""

__version__ = "0.1.0"
