"""Roadside LiDAR truck detection, tracking and geo-registration for freight signal priority."""

__version__ = "0.1.0"
