"""Rotation-compensated particle deformation.

Every particle ``i`` carries a best-fit rotation between its relaxed
neighbourhood (positions ``p``) and the current one (positions ``q``).  Each
neighbour ``j`` is pulled toward where that rotation says it should sit:

    F_{i->j} = sigma * (R_i^T (p_j - p_i) - (q_j - q_i))

Surface particles act as controls and are pinned to targets taken from the
deformed surface; the free particles follow the summed forces.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from ._svd3 import rotation3
from .sampler import SURFACE, SampledState
from .surface import MeshError, TriangleSurface


class DeformError(ValueError):
    """Bad constraints or inconsistent inputs for a deformation solve."""


@dataclass(frozen=True)
class DeformParams:
    sigma: float = 1.0
    mass: float = 1.0
    dt: float = 0.08
    tol_force: float = 1e-4
    max_iters: int = 200
    cap: float = 0.5

    def __post_init__(self):
        for name in ("sigma", "mass", "dt", "tol_force", "cap"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive, got {v!r}")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")

    def to_dict(self) -> dict:
        return {"sigma": self.sigma, "mass": self.mass, "dt": self.dt,
                "tol_force": self.tol_force, "max_iters": self.max_iters, "cap": self.cap}


@dataclass(frozen=True)
class ControlConstraint:
    particle: int
    target: np.ndarray


@dataclass
class DeformedState:
    """Solver output.  ``rotations[i]`` is R_i as used in the force law."""

    positions: np.ndarray
    rotations: np.ndarray
    iterations: int
    residual: float
    converged: bool
    relax_hash: str = ""
    degenerate: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    landmarks: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.positions)


# ---------------------------------------------------------------- controls


def bind_controls(relax: SampledState, deformed_surface: TriangleSurface,
                  source_surface: TriangleSurface | None = None) -> list[ControlConstraint]:
    """Targets for every surface particle from its binding on ``deformed_surface``.

    When ``source_surface`` is given it must be the mesh the relax state was
    sampled from (checked by content hash) and share the deformed mesh's
    topology.
    """
    b = relax.bindings
    if b is None or len(b) == 0:
        raise DeformError("relax state has no surface bindings")
    surface_ids = np.flatnonzero(relax.kinds == SURFACE)
    if not np.array_equal(np.sort(b.particle), surface_ids):
        raise DeformError("bindings do not cover exactly the surface particles")
    if source_surface is not None:
        if source_surface.content_hash() != relax.mesh_hash:
            raise DeformError("source mesh does not match the relax state's mesh hash")
        if not source_surface.same_topology(deformed_surface):
            raise MeshError("deformed surface topology differs from the source surface")
    if b.triangle.max() >= deformed_surface.n_triangles:
        raise MeshError("deformed surface has fewer triangles than the bindings reference")
    targets = b.points_on(deformed_surface)
    return [ControlConstraint(int(i), targets[k]) for k, i in enumerate(b.particle)]


def _constraint_arrays(relax: SampledState, constraints) -> tuple[np.ndarray, np.ndarray]:
    if len(constraints) == 0:
        raise DeformError("at least one control constraint is required")
    ids = np.array([c.particle for c in constraints], dtype=np.int64)
    tgt = np.array([np.asarray(c.target, dtype=np.float64) for c in constraints]).reshape(-1, 3)
    if len(np.unique(ids)) != len(ids):
        raise DeformError("control ids must be unique")
    if ids.min() < 0 or ids.max() >= relax.n:
        raise DeformError("control id out of range")
    if not np.all(relax.kinds[ids] == SURFACE):
        bad = int(ids[relax.kinds[ids] != SURFACE][0])
        raise DeformError(f"particle {bad} is not a surface particle")
    if not np.all(np.isfinite(tgt)):
        raise DeformError("control targets must be finite")
    order = np.argsort(ids, kind="stable")
    return ids[order], tgt[order]


# ---------------------------------------------------------------- rotations & forces


class _Topology:
    """Directed edge arrays and per-particle constants derived from a relax state."""

    def __init__(self, relax: SampledState):
        g = relax.graph
        self.n = relax.n
        self.src, self.dst, self.indptr = g.src, g.dst, g.indptr
        self.deg = g.degree()
        p = self.p = np.ascontiguousarray(relax.positions, dtype=np.float64)
        self.rel = p[self.dst] - p[self.src]  # p_j - p_i per directed edge (i -> j)
        lengths = np.linalg.norm(self.rel, axis=1)
        sums = np.bincount(self.src, weights=lengths, minlength=self.n)
        with np.errstate(invalid="ignore", divide="ignore"):
            self.mean_edge = np.where(self.deg > 0, sums / np.maximum(self.deg, 1), 0.0)
        cov = _segment_outer(self.rel, self.rel, self.src, self.n)
        self.degenerate = (self.deg < 3) | ~_rank_ok(np.linalg.svd(cov, compute_uv=False))


def _rank_ok(cov_sv):
    """Rank >= 2 test on singular values of sum (p_j - p_i)(p_j - p_i)^T."""
    return cov_sv[:, 1] > 1e-12 * np.maximum(cov_sv[:, 0], 1e-300)


def _segment_outer(a, b, seg, n):
    """Per-segment sums of outer products a_k b_k^T, added in array order."""
    out = np.zeros((n, 3, 3))
    for r in range(3):
        for c in range(3):
            out[:, r, c] = np.bincount(seg, weights=a[:, r] * b[:, c], minlength=n)
    return out


@nb.njit(cache=True)
def _rotation_pass(p, q, indptr, dst, degenerate, out):
    """R_i = U V^T of sum_j (p_j - p_i)(q_j - q_i)^T, neighbours in ascending order."""
    m = np.empty((3, 3))
    work = np.empty((5, 3, 3))
    for i in range(p.shape[0]):
        if degenerate[i]:
            for r in range(3):
                for c in range(3):
                    out[i, r, c] = 1.0 if r == c else 0.0
            continue
        m[:, :] = 0.0
        for t in range(indptr[i], indptr[i + 1]):
            j = dst[t]
            for r in range(3):
                a = p[j, r] - p[i, r]
                for c in range(3):
                    m[r, c] += a * (q[j, c] - q[i, c])
        rotation3(m, out[i], work)


@nb.njit(cache=True)
def _force_pass(p, q, indptr, dst, rot, sigma, out):
    """out[j] = sum over i (ascending) of sigma (R_i^T (p_j - p_i) - (q_j - q_i))."""
    out[:, :] = 0.0
    for i in range(p.shape[0]):
        for t in range(indptr[i], indptr[i + 1]):
            j = dst[t]
            d0 = p[j, 0] - p[i, 0]
            d1 = p[j, 1] - p[i, 1]
            d2 = p[j, 2] - p[i, 2]
            for c in range(3):
                rel = rot[i, 0, c] * d0 + rot[i, 1, c] * d1 + rot[i, 2, c] * d2
                out[j, c] += sigma * (rel - (q[j, c] - q[i, c]))


def local_rotation(relax: SampledState, positions, i: int) -> np.ndarray:
    """Best-fit rotation R_i = U V^T of particle ``i``'s neighbourhood.

    Falls back to the identity when ``i`` has fewer than three neighbours or
    a collinear relaxed neighbourhood.
    """
    q = np.asarray(positions, dtype=np.float64)
    p = relax.positions
    nb = relax.graph.neighbors(i)
    if len(nb) < 3:
        return np.eye(3)
    a_relax = p[nb] - p[i]
    if not _rank_ok(np.linalg.svd(a_relax.T @ a_relax, compute_uv=False)[None])[0]:
        return np.eye(3)
    out = np.empty((3, 3))
    rotation3(np.ascontiguousarray(a_relax.T @ (q[nb] - q[i])), out, np.empty((5, 3, 3)))
    return out


def all_rotations(relax: SampledState, positions, topo: _Topology | None = None) -> np.ndarray:
    topo = topo or _Topology(relax)
    q = np.ascontiguousarray(positions, dtype=np.float64)
    out = np.empty((topo.n, 3, 3))
    _rotation_pass(topo.p, q, topo.indptr, topo.dst, topo.degenerate, out)
    return out


def deformation_force(p_i, p_j, q_i, q_j, rotation, sigma: float = 1.0) -> np.ndarray:
    """Force exerted by particle i on its neighbour j."""
    rel = np.asarray(p_j, dtype=np.float64) - np.asarray(p_i, dtype=np.float64)
    cur = np.asarray(q_j, dtype=np.float64) - np.asarray(q_i, dtype=np.float64)
    return sigma * (np.asarray(rotation).T @ rel - cur)


def _edge_residuals(topo: _Topology, q, rotations):
    cur = q[topo.dst] - q[topo.src]
    # R_i^T (p_j - p_i) for every directed edge i -> j
    rotated = np.einsum("eki,ek->ei", rotations[topo.src], topo.rel)
    return rotated - cur


def accumulate_forces(relax: SampledState, positions, rotations, sigma: float = 1.0,
                      topo: _Topology | None = None) -> np.ndarray:
    """F_j = sum over i with j in Omega_i of F_{i->j}, summed in ascending i."""
    topo = topo or _Topology(relax)
    q = np.ascontiguousarray(positions, dtype=np.float64)
    out = np.empty((topo.n, 3))
    _force_pass(topo.p, q, topo.indptr, topo.dst,
                np.ascontiguousarray(rotations, dtype=np.float64), float(sigma), out)
    return out


def system_energy(relax: SampledState, positions, rotations, sigma: float = 1.0,
                  topo: _Topology | None = None) -> float:
    """sum_i sum_{j in Omega_i} sigma/2 |R_i^T (p_j - p_i) - (q_j - q_i)|^2."""
    topo = topo or _Topology(relax)
    res = _edge_residuals(topo, np.asarray(positions, dtype=np.float64), rotations)
    return float(0.5 * sigma * np.einsum("ij,ij->", res, res))


# ---------------------------------------------------------------- solver


class Deformer:
    """Holds the relax-state derived constants for repeated solves."""

    def __init__(self, relax: SampledState, params: DeformParams | None = None):
        self.relax = relax
        self.params = params or DeformParams()
        self.topo = _Topology(relax)
        self.free = np.ones(relax.n, bool)

    def evaluate(self, q):
        rot = all_rotations(self.relax, q, self.topo)
        force = accumulate_forces(self.relax, q, rot, self.params.sigma, self.topo)
        return rot, force

    def residual(self, force) -> float:
        f = force[self.free]
        return float(np.sqrt((f * f).sum(axis=1)).max()) if len(f) else 0.0

    def move(self, q, force, ids, targets):
        p = self.params
        step = p.dt / p.mass * force
        norm = np.sqrt((step * step).sum(axis=1))
        cap = p.cap * self.topo.mean_edge
        scale = np.where(norm > cap, cap / np.where(norm > 0, norm, 1.0), 1.0)
        out = q + step * scale[:, None]
        out[ids] = targets
        return out

    def solve(self, constraints, warm_start: DeformedState | np.ndarray | None = None,
              callback=None) -> DeformedState:
        ids, targets = _constraint_arrays(self.relax, constraints)
        p = self.params
        self.free = np.ones(self.relax.n, bool)
        self.free[ids] = False
        if warm_start is None:
            q = self.relax.positions.copy()
        else:
            prior = warm_start.positions if isinstance(warm_start, DeformedState) else warm_start
            q = np.array(prior, dtype=np.float64)
            if q.shape != self.relax.positions.shape:
                raise DeformError("warm start does not match the relax state")
        q[ids] = targets
        it = 0
        while True:
            rot, force = self.evaluate(q)
            res = self.residual(force)
            if callback is not None:
                callback(it, res)
            if res < p.tol_force * p.sigma or it >= p.max_iters:
                break
            q = self.move(q, force, ids, targets)
            it += 1
        return DeformedState(q, rot, it, res, res < p.tol_force * p.sigma,
                             relax_hash=state_hash(self.relax),
                             degenerate=np.flatnonzero(self.topo.degenerate))


def deform_step(relax: SampledState, positions, constraints,
                params: DeformParams | None = None) -> np.ndarray:
    """One explicit step: rotations, forces, capped move, controls pinned."""
    eng = Deformer(relax, params)
    ids, targets = _constraint_arrays(relax, constraints)
    q = np.array(positions, dtype=np.float64)
    q[ids] = targets
    _, force = eng.evaluate(q)
    return eng.move(q, force, ids, targets)


def solve(relax: SampledState, constraints, params: DeformParams | None = None,
          warm_start=None, callback=None) -> DeformedState:
    return Deformer(relax, params).solve(constraints, warm_start, callback)


def state_hash(relax: SampledState) -> str:
    """Content hash of the parts of a relax state the solver depends on."""
    h = hashlib.sha256()
    h.update(relax.mesh_hash.encode())
    h.update(np.ascontiguousarray(relax.positions, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(relax.graph.edges, dtype="<i8").tobytes())
    h.update(np.ascontiguousarray(relax.kinds, dtype="i1").tobytes())
    return h.hexdigest()

