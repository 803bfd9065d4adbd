"""Annual quasi-static time-series simulation for transmission expansion planning."""

__version__ = "0.1.0"
