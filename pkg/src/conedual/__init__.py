"""Cone-constrained linear-quadratic control through convex duality."""

__version__ = "0.1.0"
