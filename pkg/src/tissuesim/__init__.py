"""Particle-based soft-tissue deformation: surface sampling, shape-matching solve,
landmark tracking, state files and a benchmark CLI."""
from .deform import (ControlConstraint, DeformedState, DeformError, DeformParams, Deformer,
                     accumulate_forces, bind_controls, deform_step, deformation_force,
                     local_rotation, solve, system_energy)
from .index import SurfaceIndex, SurfaceQuery, build_index, query_surface
from .landmark import Landmark, LandmarkError, RigidPose, embed_landmark, track_landmark
from .sampler import (ConnectionGraph, NeighborGrid, Particle, RelaxState, SampledState,
                      SamplingError, SamplingParams, build_connections,
                      classify_surface_particles, compression_magnitude, ideal_compression,
                      init_particles, pair_force, run_sampling, sampling_step,
                      surface_force, total_force, update_radius)
from .state_io import StateFileError, export_csv, load_state, save_state
from .surface import (AffineMap, MeshError, TriangleSurface, load_mesh, make_phantom,
                      save_mesh)

__all__ = [
    "accumulate_forces", "AffineMap", "bind_controls", "build_connections", "build_index",
    "classify_surface_particles", "compression_magnitude", "ConnectionGraph",
    "ControlConstraint", "deform_step", "deformation_force", "DeformedState", "Deformer",
    "DeformError", "DeformParams", "embed_landmark", "export_csv", "ideal_compression",
    "init_particles", "Landmark", "LandmarkError", "load_mesh", "load_state", "local_rotation",
    "make_phantom", "MeshError", "NeighborGrid", "pair_force", "Particle", "query_surface",
    "RelaxState", "RigidPose", "run_sampling", "SampledState", "sampling_step",
    "SamplingError", "SamplingParams", "save_mesh", "save_state", "solve", "StateFileError",
    "surface_force", "SurfaceIndex", "SurfaceQuery", "system_energy", "total_force",
    "track_landmark", "TriangleSurface", "update_radius",
]

__version__ = "0.1.0"
