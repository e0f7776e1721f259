"""Per-shape inverse CSG with convex quadric primitives."""

__version__ = "0.1.0"
