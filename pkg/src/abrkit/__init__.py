"""Trace-driven adaptive-bitrate toolkit with rank-trained QoE rewards."""

__version__ = "0.1.0"
