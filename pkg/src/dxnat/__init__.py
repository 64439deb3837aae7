"""Non-recurring congestion detection from Traffic Condition Images."""

__version__ = "0.1.0"
