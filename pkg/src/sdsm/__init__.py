"""Monte Carlo simulation and validation of superprocesses with dependent spatial motion."""

__version__ = "0.1.0"
