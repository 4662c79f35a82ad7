"""Incompressible Navier-Stokes solver based on a pressure Poisson
reformulation with split boundary conditions and feedback stabilization,
discretized on staggered Cartesian grids with embedded boundaries."""

from .geometry import (
    GeometryError,
    StaggeredGrid,
    Rectangle,
    Disk,
    RectangleMinusDisk,
    DomainClassification,
    Patch,
    build_grid,
    classify,
    build_patches,
)
__all__ = [
    "GeometryError",
    "StaggeredGrid",
    "Rectangle",
    "Disk",
    "RectangleMinusDisk",
    "DomainClassification",
    "Patch",
    "build_grid",
    "classify",
    "build_patches",
]
