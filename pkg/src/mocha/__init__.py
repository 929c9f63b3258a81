"""Multi-objective weighted-Chebyshev actor-critic on tabular MOMDPs."""

__version__ = "0.1.0"
