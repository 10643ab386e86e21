"""Source-free online adaptation of LiDAR point-cloud segmentation on streaming frames."""

__version__ = "0.1.0"
