"""Heartbeat classification from sparse time-frequency signatures of ECG."""

__version__ = "0.1.0"
