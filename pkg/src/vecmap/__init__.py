"""Vectorized map-construction lab: distance-aware focal loss, hybrid loss
scheme and task-modulated deformable attention on a numpy autodiff engine."""

__version__ = "0.1.0"
