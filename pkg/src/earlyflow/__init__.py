"""Early classification of network flows from raw packet bytes."""

__version__ = "0.1.0"
