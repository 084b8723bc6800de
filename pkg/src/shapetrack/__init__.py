"""Shape-aware 3D multi-object tracking with learned frame-to-frame affinities."""

__version__ = "0.1.0"
