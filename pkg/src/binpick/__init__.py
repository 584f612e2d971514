"""Self-supervised grasp and shift learning for planar bin picking."""

__version__ = "0.1.0"
