"""Learn and track power allocations for wireless control loops."""

__version__ = "0.1.0"
