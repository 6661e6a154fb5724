"""Configuration-driven provider routing with a fault-injection simulator."""

__version__ = "0.1.0"
