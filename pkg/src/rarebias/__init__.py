"""Neural bias potentials and importance sampling for rare Langevin transitions."""

__version__ = "0.1.0"
