"""Discrete-time ride-sourcing market simulator on road networks."""

__version__ = "0.1.0"
