"""In-network optimizer simulation: switch aggregation, credit transport, out-of-core Adam."""

__version__ = "0.1.0"
