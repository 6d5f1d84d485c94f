"""Deep template matching and attribute-wise keypoint supervision for pedestrian attributes."""

__version__ = "0.1.0"
