"""Mixed-timescale stochastic optimisation for wireless relay networks."""

__version__ = "0.1.0"
