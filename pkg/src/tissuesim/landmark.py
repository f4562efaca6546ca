"""Rigid landmark (e.g. a lesion) carried by the particle system.

A landmark is attached to its nearest internal particle.  After a solve the
particle's neighbourhood rotation gives the landmark's orientation, and the
stored offset is rotated with it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .deform import DeformedState, local_rotation
from .index import SurfaceIndex
from .sampler import INTERNAL, SampledState


class LandmarkError(ValueError):
    pass


@dataclass(frozen=True)
class Landmark:
    particle: int
    point: np.ndarray   # requested position in the relax state
    offset: np.ndarray  # point - relax position of the particle


@dataclass(frozen=True)
class RigidPose:
    position: np.ndarray
    rotation: np.ndarray
    reliable: bool = True

    def angle_to(self, rotation) -> float:
        """Angle in degrees between this pose's rotation and ``rotation``."""
        return rotation_angle(self.rotation.T @ np.asarray(rotation, dtype=np.float64))


def rotation_angle(r) -> float:
    """Rotation angle of a 3x3 rotation matrix, in degrees."""
    c = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


def embed_landmark(relax: SampledState, point, index: SurfaceIndex) -> Landmark:
    """Bind ``point`` to the nearest internal particle (ties go to the lower id)."""
    x = np.asarray(point, dtype=np.float64).reshape(3)
    q = index.query(x)
    if not q.is_inside or q.distance == 0.0:
        raise LandmarkError(f"landmark {x.tolist()} is not strictly inside the surface")
    internal = np.flatnonzero(relax.kinds == INTERNAL)
    if len(internal) == 0:
        raise LandmarkError("relax state has no internal particles")
    d2 = ((relax.positions[internal] - x) ** 2).sum(axis=1)
    k = int(internal[np.argmin(d2)])  # argmin returns the first, i.e. lowest id
    if relax.graph.degree()[k] < 3:
        raise LandmarkError(f"particle {k} has fewer than 3 neighbours")
    return Landmark(k, x, x - relax.positions[k])


def track_landmark(relax: SampledState, deformed: DeformedState, lm: Landmark) -> RigidPose:
    """Rigid pose of the landmark in the deformed state.

    The neighbourhood fit R satisfies R^T (p_j - p_i) ~ (q_j - q_i), so the
    physical rotation taking relax directions to deformed ones is R^T; that is
    what the pose reports and what carries the offset.
    """
    k = lm.particle
    nb = relax.graph.neighbors(k)
    reliable = len(nb) >= 3 and k not in set(np.asarray(deformed.degenerate).tolist())
    r = local_rotation(relax, deformed.positions, k)
    rot = r.T
    return RigidPose(deformed.positions[k] + rot @ lm.offset, rot, bool(reliable))
