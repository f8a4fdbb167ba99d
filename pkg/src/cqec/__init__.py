"""Continuous error correction of the three-qubit bit-flip code during annealing."""

__version__ = "0.1.0"
