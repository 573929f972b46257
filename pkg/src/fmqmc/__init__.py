"""Flow-matching transport maps for randomized quasi-Monte Carlo integration."""

__version__ = "0.1.0"
