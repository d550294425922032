"""Object distance estimation for downward-facing fisheye cameras."""

__version__ = "0.1.0"
