"""Desk-scale double occupancy network: image -> mesh -> point cloud -> mesh, in numpy."""

__version__ = "0.1.0"
