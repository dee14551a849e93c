"""Stereo visual odometry with sun-direction constraints in a sliding-window bundle adjuster."""

__version__ = "0.1.0"
