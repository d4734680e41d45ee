"""Time-varying Bayesian optimization with uncertainty injection and convexity constraints."""

__version__ = "0.1.0"
