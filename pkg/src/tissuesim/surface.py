"""Closed triangle surfaces: validation, OBJ/OFF ingestion and synthetic phantoms."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class MeshError(ValueError):
    """Raised for unparsable or geometrically invalid surfaces."""


@dataclass(frozen=True, eq=False)
class TriangleSurface:
    """Watertight, outward-oriented triangle mesh.

    ``normals`` are recomputed from the winding on construction and are
    unit length, pointing from inside to outside.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray = field(init=False, repr=False)
    areas: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3 or len(v) == 0:
            raise MeshError("vertices must be a non-empty (n, 3) array")
        if t.ndim != 2 or t.shape[1] != 3 or len(t) == 0:
            raise MeshError("triangles must be a non-empty (m, 3) array")
        if not np.all(np.isfinite(v)):
            raise MeshError("non-finite vertex coordinates")
        if t.min() < 0 or t.max() >= len(v):
            raise MeshError("triangle references a missing vertex")
        cross = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        twice_area = np.linalg.norm(cross, axis=1)
        scale = np.ptp(v, axis=0).max()
        bad = np.flatnonzero(twice_area <= 1e-12 * scale * scale)
        if len(bad):
            raise MeshError(f"degenerate (zero-area) triangle {int(bad[0])}")
        v.flags.writeable = False
        t.flags.writeable = False
        normals = cross / twice_area[:, None]
        normals.flags.writeable = False
        areas = 0.5 * twice_area
        areas.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "areas", areas)
        _check_closed(t)
        if self.volume() <= 0.0:
            raise MeshError("surface is inward-oriented (negative enclosed volume)")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def volume(self) -> float:
        """Enclosed volume by the divergence theorem."""
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return float(np.einsum("ij,ij->", a, np.cross(b, c)) / 6.0)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def diameter(self) -> float:
        """Length of the bounding-box diagonal."""
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.vertices, dtype="<f8").tobytes())
        h.update(np.asarray(self.triangles, dtype="<i8").tobytes())
        return h.hexdigest()

    def same_topology(self, other: TriangleSurface) -> bool:
        return (
            self.n_vertices == other.n_vertices
            and self.triangles.shape == other.triangles.shape
            and bool(np.array_equal(self.triangles, other.triangles))
        )

    def transformed(self, matrix, offset=(0.0, 0.0, 0.0)) -> TriangleSurface:
        """Apply ``x -> matrix @ x + offset`` to every vertex; topology is kept."""
        m = np.asarray(matrix, dtype=np.float64).reshape(3, 3)
        det = np.linalg.det(m)
        if not np.isfinite(det) or abs(det) < 1e-12 or np.linalg.cond(m) > 1e12:
            raise MeshError("transform matrix is not invertible")
        if det < 0:
            raise MeshError("transform matrix reverses orientation")
        verts = self.vertices @ m.T + np.asarray(offset, dtype=np.float64)
        return TriangleSurface(verts, self.triangles.copy())


def _check_closed(triangles: np.ndarray) -> None:
    # each directed edge must occur once and be matched by its reverse exactly once
    directed = np.concatenate(
        [triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]]
    )
    n = int(triangles.max()) + 1
    key = directed[:, 0] * n + directed[:, 1]
    uniq, counts = np.unique(key, return_counts=True)
    if np.any(counts > 1):
        k = uniq[counts > 1][0]
        undirected = np.minimum(directed[:, 0], directed[:, 1]) * n + np.maximum(
            directed[:, 0], directed[:, 1]
        )
        mult = np.count_nonzero(undirected == min(k // n, k % n) * n + max(k // n, k % n))
        if mult > 2:
            raise MeshError(f"non-manifold edge ({k // n}, {k % n})")
        raise MeshError(f"inconsistent winding at edge ({k // n}, {k % n})")
    reverse = directed[:, 1] * n + directed[:, 0]
    missing = ~np.isin(reverse, uniq)
    if np.any(missing):
        a, b = directed[np.flatnonzero(missing)[0]]
        raise MeshError(f"open surface: boundary edge ({a}, {b})")


# ---------------------------------------------------------------- file formats


def load_mesh(path, format: str | None = None) -> TriangleSurface:
    """Read an OBJ or OFF file. The format is taken from the suffix unless given."""
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).upper()
    try:
        text = path.read_text()
    except OSError as exc:
        raise MeshError(f"cannot read {path}: {exc}") from exc
    if fmt == "OBJ":
        verts, tris = _parse_obj(text)
    elif fmt == "OFF":
        verts, tris = _parse_off(text)
    else:
        raise MeshError(f"unsupported mesh format {fmt!r} (expected OBJ or OFF)")
    return TriangleSurface(verts, tris)


def _parse_obj(text: str):
    verts, tris = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
                if len(verts[-1]) != 3:
                    raise ValueError("vertex needs 3 coordinates")
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                if len(idx) != 3:
                    raise ValueError(f"face has {len(idx)} vertices, expected 3")
                n = len(verts)
                tris.append([i - 1 if i > 0 else n + i for i in idx])
        except ValueError as exc:
            raise MeshError(f"OBJ parse error at line {lineno}: {exc}") from exc
    if not verts or not tris:
        raise MeshError("OBJ file has no vertices or faces")
    return np.array(verts, dtype=np.float64), np.array(tris, dtype=np.int64)


def _parse_off(text: str):
    lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines or lines[0].split()[0] != "OFF":
        raise MeshError("OFF parse error: missing OFF header")
    head = lines[0].split()[1:]
    body = lines[1:]
    if not head:
        if not body:
            raise MeshError("OFF parse error: missing counts line")
        head, body = body[0].split(), body[1:]
    try:
        nv, nf = int(head[0]), int(head[1])
        if len(body) < nv + nf:
            raise ValueError("file ends before all vertices and faces are read")
        verts = [[float(x) for x in body[k].split()[:3]] for k in range(nv)]
        tris = []
        for k in range(nv, nv + nf):
            tok = body[k].split()
            if int(tok[0]) != 3:
                raise ValueError(f"face {k - nv} is not a triangle")
            tris.append([int(x) for x in tok[1:4]])
    except (ValueError, IndexError) as exc:
        raise MeshError(f"OFF parse error: {exc}") from exc
    return np.array(verts, dtype=np.float64), np.array(tris, dtype=np.int64)


def save_mesh(surface: TriangleSurface, path, format: str | None = None) -> None:
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).upper()
    out = []
    if fmt == "OBJ":
        out += [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in surface.vertices]
        out += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in surface.triangles]
    elif fmt == "OFF":
        out.append("OFF")
        out.append(f"{surface.n_vertices} {surface.n_triangles} 0")
        out += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in surface.vertices]
        out += [f"3 {a} {b} {c}" for a, b, c in surface.triangles]
    else:
        raise MeshError(f"unsupported mesh format {fmt!r}")
    path.write_text("\n".join(out) + "\n")


# ---------------------------------------------------------------- phantoms


def icosphere(subdiv: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere with ``20 * 4**subdiv`` triangles."""
    t = (1.0 + 5.0**0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    for _ in range(subdiv):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(verts), np.array(faces, dtype=np.int64)


def box_mesh(subdiv: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit cube centred at the origin, each face split into ``subdiv**2`` quads."""
    n = max(int(subdiv), 1)
    index: dict[tuple[int, int, int], int] = {}
    verts, faces = [], []

    def vid(p):
        if p not in index:
            index[p] = len(verts)
            verts.append(p)
        return index[p]

    for axis in range(3):
        u_ax, v_ax = (axis + 1) % 3, (axis + 2) % 3
        for side in (0, n):
            for i in range(n):
                for j in range(n):
                    corners = []
                    for di, dj in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = [0, 0, 0]
                        p[axis], p[u_ax], p[v_ax] = side, i + di, j + dj
                        corners.append(vid(tuple(p)))
                    a, b, c, d = corners
                    # (u, v, axis) is right-handed, so this winding faces +axis
                    if side == n:
                        faces += [(a, b, c), (a, c, d)]
                    else:
                        faces += [(a, c, b), (a, d, c)]
    v = np.array(verts, dtype=np.float64) / n - 0.5
    return v, np.array(faces, dtype=np.int64)


@dataclass(frozen=True)
class AffineMap:
    """``x -> matrix @ x + offset``; ``rigid`` builds one from a proper rotation."""

    matrix: np.ndarray
    offset: np.ndarray

    @classmethod
    def rigid(cls, rotation, translation=(0.0, 0.0, 0.0)) -> AffineMap:
        r = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or np.linalg.det(r) < 0:
            raise MeshError("rigid map needs a proper rotation matrix")
        return cls(r, np.asarray(translation, dtype=np.float64))

    @classmethod
    def affine(cls, matrix, offset=(0.0, 0.0, 0.0)) -> AffineMap:
        return cls(np.asarray(matrix, dtype=np.float64).reshape(3, 3),
                   np.asarray(offset, dtype=np.float64))

    def __call__(self, points):
        return np.asarray(points, dtype=np.float64) @ self.matrix.T + self.offset


def rotation_matrix(axis, degrees: float) -> np.ndarray:
    """Rodrigues rotation about ``axis``."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    th = np.deg2rad(degrees)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(th) * kx + (1 - np.cos(th)) * (kx @ kx)


PHANTOM_KINDS = ("sphere", "ellipsoid", "box")


def make_phantom(kind: str, dims=(1.0, 1.0, 1.0), subdiv: int = 3,
                 deform: AffineMap | None = None) -> TriangleSurface:
    """Synthetic watertight phantom.

    ``dims`` are radii for sphere/ellipsoid (a scalar is accepted for the
    sphere) and edge lengths for the box. The deformed variant shares vertex
    order and triangle indices with the undeformed one.
    """
    d = np.broadcast_to(np.asarray(dims, dtype=np.float64), (3,)).copy()
    if np.any(d <= 0) or not np.all(np.isfinite(d)):
        raise MeshError("phantom dimensions must be positive")
    if kind == "sphere":
        if not np.allclose(d, d[0]):
            raise MeshError("sphere needs a single radius; use 'ellipsoid'")
        verts, tris = icosphere(subdiv)
    elif kind == "ellipsoid":
        verts, tris = icosphere(subdiv)
    elif kind == "box":
        verts, tris = box_mesh(subdiv)
    else:
        raise MeshError(f"unknown phantom kind {kind!r}; expected one of {PHANTOM_KINDS}")
    surface = TriangleSurface(verts * d, tris)
    if deform is not None:
        surface = surface.transformed(deform.matrix, deform.offset)
    return surface
