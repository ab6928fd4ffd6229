"""Clip-art supervision data generation for street objects under occlusion.

Mines unoccluded objects from stationary-camera detection streams, recovers
metric pose and shape with a ground-plane constraint, composites the cutouts
depth-ordered into background images, and evaluates the results with
occlusion-binned metrics.
"""

__version__ = "0.1.0"

from .geometry import CameraModel, Pixel, RigidPose  # noqa: F401
from .shape_model import ShapeBasis, ShapeCoefficients, toy_vehicle_basis  # noqa: F401
