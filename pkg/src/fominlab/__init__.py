"""Monte Carlo verification toolkit for gradient estimates, invariant measures and
Fomin differentiability of dissipative SDEs with additive noise."""

__version__ = "0.1.0"
