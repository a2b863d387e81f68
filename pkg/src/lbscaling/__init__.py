"""Load balancing in many-server systems with finite per-server buffers."""

__version__ = "0.1.0"
