"""Desk-scale magnetic manipulation toolkit for a tethered ultrasound probe:
field models, magnetometer-array + IMU sensor fusion, closed-loop actuation,
physics simulation, scripted experiments and a live teleoperation service."""

from .field_models import MagnetSpec, Wrench, default_actuator_spec, default_capsule_spec
from .geometry import Pose

__all__ = [
    "MagnetSpec",
    "Pose",
    "Wrench",
    "default_actuator_spec",
    "default_capsule_spec",
]

__version__ = "0.1.0"
