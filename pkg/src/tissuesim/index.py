"""Nearest-point / normal / inside queries against a closed triangle surface.

Inside/outside uses the sign of ``normal . direction`` where ``normal`` is the
angle-weighted pseudo-normal of the feature (face, edge or vertex) holding the
nearest point. With pseudo-normals this sign test is exact for watertight,
consistently oriented meshes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

from .surface import TriangleSurface

LEAF_SIZE = 4

# nearest-feature codes returned by closest_point_triangle
FACE, VERT_A, VERT_B, VERT_C, EDGE_AB, EDGE_AC, EDGE_BC = range(7)


@dataclass(frozen=True)
class SurfaceQuery:
    nearest_point: np.ndarray
    normal: np.ndarray
    direction: np.ndarray
    distance: float
    is_inside: bool
    triangle: int
    barycentric: np.ndarray


class SurfaceIndex:
    """Bounding-volume hierarchy over the triangles of one surface.

    Immutable after construction; queries are read-only.
    """

    def __init__(self, surface: TriangleSurface):
        self.surface = surface
        v, t = surface.vertices, surface.triangles
        self.tri_verts = np.ascontiguousarray(v[t])  # (T, 3, 3)
        self.face_normals = np.ascontiguousarray(surface.normals)
        self.vertex_normals = _vertex_pseudo_normals(surface)
        self.tri_edges, self.edge_normals = _edge_pseudo_normals(surface)
        (self.node_lo, self.node_hi, self.node_left, self.node_right,
         self.node_start, self.node_count, self.order) = _build_bvh(self.tri_verts)
        for arr in vars(self).values():
            if isinstance(arr, np.ndarray):
                arr.flags.writeable = False

    @property
    def arrays(self):
        """Tuple of arrays consumed by the compiled query kernels."""
        return (self.tri_verts, self.surface.triangles, self.face_normals,
                self.vertex_normals, self.tri_edges, self.edge_normals,
                self.node_lo, self.node_hi, self.node_left, self.node_right,
                self.node_start, self.node_count, self.order)

    def query(self, point) -> SurfaceQuery:
        p = np.asarray(point, dtype=np.float64).reshape(1, 3)
        out = query_many(self, p)
        return SurfaceQuery(out["nearest"][0], out["normal"][0], out["direction"][0],
                            float(out["distance"][0]), bool(out["inside"][0]),
                            int(out["triangle"][0]), out["barycentric"][0])

    def contains(self, points) -> np.ndarray:
        """Boolean inside mask (points on the surface count as inside)."""
        return query_many(self, np.atleast_2d(points))["inside"]

    def signed_distance(self, points) -> np.ndarray:
        """Distance to the surface, negative inside."""
        out = query_many(self, np.atleast_2d(points))
        return np.where(out["inside"], -out["distance"], out["distance"])


def build_index(surface: TriangleSurface) -> SurfaceIndex:
    return SurfaceIndex(surface)


def query_surface(index: SurfaceIndex, point) -> SurfaceQuery:
    return index.query(point)


def query_many(index: SurfaceIndex, points) -> dict:
    pts = np.ascontiguousarray(points, dtype=np.float64)
    n = len(pts)
    nearest = np.empty((n, 3))
    normal = np.empty((n, 3))
    direction = np.empty((n, 3))
    bary = np.empty((n, 3))
    dist = np.empty(n)
    tri = np.empty(n, np.int64)
    inside = np.empty(n, np.bool_)
    _query_batch(pts, *index.arrays, nearest, normal, direction, bary, dist, tri, inside)
    return dict(nearest=nearest, normal=normal, direction=direction, distance=dist,
                triangle=tri, barycentric=bary, inside=inside)


# ---------------------------------------------------------------- construction


def _vertex_pseudo_normals(surface: TriangleSurface) -> np.ndarray:
    v, t, fn = surface.vertices, surface.triangles, surface.normals
    acc = np.zeros_like(v)
    for k in range(3):
        a = v[t[:, k]]
        e1 = v[t[:, (k + 1) % 3]] - a
        e2 = v[t[:, (k + 2) % 3]] - a
        cosang = np.einsum("ij,ij->i", e1, e2) / (
            np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1))
        ang = np.arccos(np.clip(cosang, -1.0, 1.0))
        np.add.at(acc, t[:, k], ang[:, None] * fn)
    return np.ascontiguousarray(acc / np.linalg.norm(acc, axis=1, keepdims=True))


def _edge_pseudo_normals(surface: TriangleSurface):
    t, fn = surface.triangles, surface.normals
    # local edge slots: 0 = ab, 1 = ac, 2 = bc
    pairs = np.stack([t[:, [0, 1]], t[:, [0, 2]], t[:, [1, 2]]], axis=1)  # (T, 3, 2)
    flat = np.sort(pairs.reshape(-1, 2), axis=1)
    key = flat[:, 0] * surface.n_vertices + flat[:, 1]
    uniq, inverse = np.unique(key, return_inverse=True)
    tri_edges = inverse.reshape(-1, 3).astype(np.int64)
    acc = np.zeros((len(uniq), 3))
    np.add.at(acc, inverse, np.repeat(fn, 3, axis=0))
    return np.ascontiguousarray(tri_edges), acc / np.linalg.norm(acc, axis=1, keepdims=True)


def _build_bvh(tri_verts: np.ndarray):
    lo_t = tri_verts.min(axis=1)
    hi_t = tri_verts.max(axis=1)
    cent = tri_verts.mean(axis=1)
    order = np.arange(len(tri_verts), dtype=np.int64)
    lo, hi, left, right, start, count = [], [], [], [], [], []

    def node(s, e):
        k = len(lo)
        ids = order[s:e]
        lo.append(lo_t[ids].min(axis=0))
        hi.append(hi_t[ids].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(s)
        count.append(e - s)
        return k

    root = node(0, len(order))
    stack = [(root, 0, len(order))]
    while stack:
        k, s, e = stack.pop()
        if e - s <= LEAF_SIZE:
            continue
        ids = order[s:e]
        c = cent[ids]
        axis = int(np.argmax(np.ptp(c, axis=0)))
        srt = np.argsort(c[:, axis], kind="stable")
        order[s:e] = ids[srt]
        m = (s + e) // 2
        left[k] = node(s, m)
        right[k] = node(m, e)
        count[k] = 0
        stack.append((left[k], s, m))
        stack.append((right[k], m, e))
    return (np.array(lo), np.array(hi), np.array(left, np.int64), np.array(right, np.int64),
            np.array(start, np.int64), np.array(count, np.int64), order)


# ---------------------------------------------------------------- compiled kernels


@nb.njit(cache=True, inline="always")
def _dot(ax, ay, az, bx, by, bz):
    return ax * bx + ay * by + az * bz


@nb.njit(cache=True)
def closest_point_triangle(px, py, pz, tv):
    """Nearest point of triangle ``tv`` (3x3) to p.

    Returns (x, y, z, u, v, w, feature) with point = u*a + v*b + w*c.
    Region tests follow the usual Voronoi-region walk.
    """
    ax, ay, az = tv[0, 0], tv[0, 1], tv[0, 2]
    bx, by, bz = tv[1, 0], tv[1, 1], tv[1, 2]
    cx, cy, cz = tv[2, 0], tv[2, 1], tv[2, 2]
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = _dot(abx, aby, abz, apx, apy, apz)
    d2 = _dot(acx, acy, acz, apx, apy, apz)
    if d1 <= 0.0 and d2 <= 0.0:
        return ax, ay, az, 1.0, 0.0, 0.0, VERT_A
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = _dot(abx, aby, abz, bpx, bpy, bpz)
    d4 = _dot(acx, acy, acz, bpx, bpy, bpz)
    if d3 >= 0.0 and d4 <= d3:
        return bx, by, bz, 0.0, 1.0, 0.0, VERT_B
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return ax + v * abx, ay + v * aby, az + v * abz, 1.0 - v, v, 0.0, EDGE_AB
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = _dot(abx, aby, abz, cpx, cpy, cpz)
    d6 = _dot(acx, acy, acz, cpx, cpy, cpz)
    if d6 >= 0.0 and d5 <= d6:
        return cx, cy, cz, 0.0, 0.0, 1.0, VERT_C
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return ax + w * acx, ay + w * acy, az + w * acz, 1.0 - w, 0.0, w, EDGE_AC
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return (bx + w * (cx - bx), by + w * (cy - by), bz + w * (cz - bz),
                0.0, 1.0 - w, w, EDGE_BC)
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return (ax + abx * v + acx * w, ay + aby * v + acy * w, az + abz * v + acz * w,
            1.0 - v - w, v, w, FACE)


@nb.njit(cache=True)
def _box_dist2(px, py, pz, lo, hi, k):
    """Squared distance from p to the box of node ``k``."""
    d = 0.0
    e = max(lo[k, 0] - px, 0.0, px - hi[k, 0])
    d += e * e
    e = max(lo[k, 1] - py, 0.0, py - hi[k, 1])
    d += e * e
    e = max(lo[k, 2] - pz, 0.0, pz - hi[k, 2])
    d += e * e
    return d


@nb.njit(cache=True)
def nearest_triangle(px, py, pz, tri_verts, node_lo, node_hi, node_left, node_right,
                     node_start, node_count, order, hint=-1):
    """BVH search; ties on distance go to the lower triangle id.

    ``hint`` (a triangle id or -1) seeds the search bound; the result does not
    depend on it.
    """
    best = np.inf
    best_t = -1
    bx = by = bz = 0.0
    bu = bv = bw = 0.0
    bf = 0
    if hint >= 0:
        bx, by, bz, bu, bv, bw, bf = closest_point_triangle(px, py, pz, tri_verts[hint])
        best = (px - bx) ** 2 + (py - by) ** 2 + (pz - bz) ** 2
        best_t = hint
    stack = np.empty(128, np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        k = stack[sp]
        if _box_dist2(px, py, pz, node_lo, node_hi, k) > best:
            continue
        if node_count[k] > 0:
            for s in range(node_start[k], node_start[k] + node_count[k]):
                t = order[s]
                x, y, z, u, v, w, f = closest_point_triangle(px, py, pz, tri_verts[t])
                d2 = (px - x) ** 2 + (py - y) ** 2 + (pz - z) ** 2
                if d2 < best or (d2 == best and t < best_t):
                    best, best_t = d2, t
                    bx, by, bz, bu, bv, bw, bf = x, y, z, u, v, w, f
        else:
            l, r = node_left[k], node_right[k]
            dl = _box_dist2(px, py, pz, node_lo, node_hi, l)
            dr = _box_dist2(px, py, pz, node_lo, node_hi, r)
            # push the farther child first so the nearer one is searched first
            if dl <= dr:
                stack[sp] = r
                stack[sp + 1] = l
            else:
                stack[sp] = l
                stack[sp + 1] = r
            sp += 2
    return best_t, bf, bx, by, bz, bu, bv, bw, np.sqrt(best)


@nb.njit(cache=True)
def feature_normal(t, f, triangles, face_normals, vertex_normals, tri_edges, edge_normals):
    if f == FACE:
        return face_normals[t]
    if f == VERT_A:
        return vertex_normals[triangles[t, 0]]
    if f == VERT_B:
        return vertex_normals[triangles[t, 1]]
    if f == VERT_C:
        return vertex_normals[triangles[t, 2]]
    if f == EDGE_AB:
        return edge_normals[tri_edges[t, 0]]
    if f == EDGE_AC:
        return edge_normals[tri_edges[t, 1]]
    return edge_normals[tri_edges[t, 2]]


@nb.njit(cache=True)
def query_point(px, py, pz, tri_verts, triangles, face_normals, vertex_normals, tri_edges,
                edge_normals, node_lo, node_hi, node_left, node_right, node_start,
                node_count, order, hint=-1):
    """Returns (tri, nearest xyz, normal xyz, direction xyz, distance, inside, u, v, w)."""
    t, f, x, y, z, u, v, w, dist = nearest_triangle(
        px, py, pz, tri_verts, node_lo, node_hi, node_left, node_right,
        node_start, node_count, order, hint)
    n = feature_normal(t, f, triangles, face_normals, vertex_normals, tri_edges, edge_normals)
    if dist > 0.0:
        dx, dy, dz = (px - x) / dist, (py - y) / dist, (pz - z) / dist
        inside = n[0] * dx + n[1] * dy + n[2] * dz <= 0.0
    else:
        dx = dy = dz = 0.0
        inside = True
    return t, x, y, z, n[0], n[1], n[2], dx, dy, dz, dist, inside, u, v, w


@nb.njit(cache=True)
def _query_batch(pts, tri_verts, triangles, face_normals, vertex_normals, tri_edges,
                 edge_normals, node_lo, node_hi, node_left, node_right, node_start,
                 node_count, order, nearest, normal, direction, bary, dist, tri, inside):
    for i in range(pts.shape[0]):
        r = query_point(pts[i, 0], pts[i, 1], pts[i, 2], tri_verts, triangles, face_normals,
                        vertex_normals, tri_edges, edge_normals, node_lo, node_hi,
                        node_left, node_right, node_start, node_count, order)
        tri[i] = r[0]
        nearest[i, 0], nearest[i, 1], nearest[i, 2] = r[1], r[2], r[3]
        normal[i, 0], normal[i, 1], normal[i, 2] = r[4], r[5], r[6]
        direction[i, 0], direction[i, 1], direction[i, 2] = r[7], r[8], r[9]
        dist[i] = r[10]
        inside[i] = r[11]
        bary[i, 0], bary[i, 1], bary[i, 2] = r[12], r[13], r[14]
