"""Optical flow on 360-degree video across equirect, tri-cylinder and padded-cube projections."""

__version__ = "0.1.0"
