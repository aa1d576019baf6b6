"""Random iteration of rational maps of the Riemann sphere: random Green
functions, fiber measures, transfer operators and statistical checks."""

__version__ = "0.1.0"
