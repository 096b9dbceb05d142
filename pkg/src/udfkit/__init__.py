"""Neural unsigned distance fields fitted to raw point clouds."""

__version__ = "0.1.0"
