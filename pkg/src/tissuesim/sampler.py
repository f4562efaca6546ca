"""Uniform volumetric sampling with inflating balloons.

Each particle carries a balloon radius. Pairs interact through the
h**6 - h**3 intermolecular-style force, the surface pushes escaped particles
back in, and each radius is driven towards the compression of an ideal
close-packing. At convergence the connection graph is thresholded from the
final spacing.

Positions move in units of the initial radius ``r0``: the pair force depends
only on ``d / (r_i + r_j)``, so the step ``dt * F / m`` is a displacement
measured in multiples of ``r0``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numba as nb
import numpy as np

from .index import SurfaceIndex, build_index, query_many, query_point
from .surface import TriangleSurface

INTERNAL, SURFACE = 0, 1
KIND_NAMES = ("internal", "surface")

# close-packing: every balloon touches 12 neighbours at 0.75 (r_i + r_j)
PACKING_NEIGHBOURS = 12
PACKING_SPACING = 0.75


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplingParams:
    N: int = 1000
    mu: float = 50.0
    alpha: float = 0.5
    eta: float = 0.05
    mass: float = 1.0
    dt: float = 0.1
    radius_gain: float = 0.1
    cutoff: float = 1.0
    connect: float = 0.9
    tol_disp: float = 1e-3
    tol_radius: float = 1e-4
    max_iters: int = 2000
    seed: int = 0
    surface_band: float = 0.75

    def __post_init__(self):
        checks = [
            (self.N >= 1, "N must be >= 1"),
            (self.mu > 0, "mu must be > 0"),
            (0 < self.alpha < 1, "alpha must lie in (0, 1)"),
            (self.eta > 0, "eta must be > 0"),
            (self.mass > 0, "mass must be > 0"),
            (self.dt > 0, "dt must be > 0"),
            (self.radius_gain > 0, "radius_gain must be > 0"),
            (self.cutoff >= 1, "cutoff must be >= 1"),
            (0 < self.connect < self.cutoff, "connect must lie in (0, cutoff)"),
            (self.tol_disp > 0 and self.tol_radius > 0, "tolerances must be > 0"),
            (self.max_iters >= 0, "max_iters must be >= 0"),
            (self.surface_band > 0, "surface_band must be > 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Particle:
    id: int
    position: np.ndarray
    radius: float
    kind: str = "internal"


# ---------------------------------------------------------------- scalar model


def imf_magnitude(ratio, alpha: float = 0.5):
    """Signed pair-force magnitude at ``ratio = d / (r_i + r_j)``; positive repels."""
    h = 1.0 / (alpha * np.asarray(ratio, dtype=np.float64) + (1.0 - alpha))
    h3 = h * h * h
    return h3 * h3 - h3


def pair_force(p_i: Particle, p_j: Particle, alpha: float = 0.5,
               cutoff: float | None = None) -> np.ndarray:
    """Force on ``p_i`` exerted by ``p_j``.

    ``cutoff`` is the range multiplier of ``r_i + r_j``; ``None`` disables it.
    Coincident particles are separated along a deterministic direction.
    """
    diff = np.asarray(p_i.position, dtype=np.float64) - np.asarray(p_j.position, dtype=np.float64)
    rs = p_i.radius + p_j.radius
    d = float(np.sqrt(diff @ diff))
    if cutoff is not None and d > cutoff * rs:
        return np.zeros(3)
    if d == 0.0:
        lo, hi = min(p_i.id, p_j.id), max(p_i.id, p_j.id)
        u = np.array(_jitter_direction(lo, hi, 0))
        if p_i.id > p_j.id:
            u = -u
        d = 1e-6 * min(p_i.radius, p_j.radius)
    else:
        u = diff / d
    return float(imf_magnitude(d / rs, alpha)) * u


def ideal_compression(alpha: float = 0.5) -> float:
    """Compression felt by a balloon in an ideal 12-neighbour close packing."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    return float(PACKING_NEIGHBOURS * imf_magnitude(PACKING_SPACING, alpha))


def surface_force(query) -> np.ndarray:
    """Unit inward push for an escaped particle, zero inside or on the surface."""
    if query.is_inside or query.distance == 0.0:
        return np.zeros(3)
    return -np.asarray(query.normal, dtype=np.float64)


def radius_increment(compress, ideal: float, eta: float):
    """Balloon inflation rate; positive when under-compressed."""
    arg = np.maximum(1.0 + eta * (np.asarray(compress, dtype=np.float64) - ideal), 1e-3)
    return -np.log(arg)


def update_radius(r: float, compress: float, params: SamplingParams, r0: float,
                  r_cap: float = math.inf) -> float:
    dr = float(radius_increment(compress, ideal_compression(params.alpha), params.eta))
    return float(min(max(1e-6 * r0, r + params.radius_gain * r0 * dr), r_cap))


# ---------------------------------------------------------------- neighbour grid


@nb.njit(cache=True)
def _grid_build(pos, lo, cell):
    """Counting sort of particles into a dense cell table.

    Returns per-particle cell coordinates, grid dims, cell start offsets and
    the particle order (ascending id within each cell).
    """
    n = pos.shape[0]
    ijk = np.empty((n, 3), np.int64)
    dims = np.ones(3, np.int64)
    for i in range(n):
        for a in range(3):
            c = np.int64(math.floor((pos[i, a] - lo[a]) / cell))
            ijk[i, a] = c
            if c + 1 > dims[a]:
                dims[a] = c + 1
    ncell = dims[0] * dims[1] * dims[2]
    start = np.zeros(ncell + 1, np.int64)
    cid = np.empty(n, np.int64)
    for i in range(n):
        cid[i] = (ijk[i, 0] * dims[1] + ijk[i, 1]) * dims[2] + ijk[i, 2]
        start[cid[i] + 1] += 1
    for c in range(ncell):
        start[c + 1] += start[c]
    fill = start[:-1].copy()
    order = np.empty(n, np.int64)
    for i in range(n):
        order[fill[cid[i]]] = i
        fill[cid[i]] += 1
    return ijk, dims, start, order


@nb.njit(cache=True)
def _grid_candidates(cx, cy, cz, dims, start, order, out):
    cnt = 0
    for x in range(max(cx - 1, 0), min(cx + 2, dims[0])):
        for y in range(max(cy - 1, 0), min(cy + 2, dims[1])):
            for z in range(max(cz - 1, 0), min(cz + 2, dims[2])):
                c = (x * dims[1] + y) * dims[2] + z
                for t in range(start[c], start[c + 1]):
                    out[cnt] = order[t]
                    cnt += 1
    return cnt


@nb.njit(cache=True)
def _neighbor_lists(pos, radius, lo, rad=None, scale=0.0, skin=0.0, half=False):
    """CSR lists of neighbours j != i (j > i only when ``half``), ascending j.

    Without ``rad`` a pair qualifies when |p_i - p_j| < radius.  With ``rad``
    the per-pair bound scale * (r_i + r_j) + skin is used instead, and
    ``radius`` must be at least the largest such bound (it sets the grid cell).
    """
    n = pos.shape[0]
    ijk, dims, start, order = _grid_build(pos, lo, radius)
    r2 = radius * radius
    buf = np.empty(n, np.int64)
    tmp = np.empty(n, np.int64)
    counts = np.zeros(n + 1, np.int64)
    per_pair = rad is not None
    for sweep in range(2):
        if sweep == 1:
            nbr = np.empty(counts[n], np.int64)
        total = 0
        for i in range(n):
            c = _grid_candidates(ijk[i, 0], ijk[i, 1], ijk[i, 2], dims, start, order, buf)
            m = 0
            for t in range(c):
                j = buf[t]
                if j == i or (half and j < i):
                    continue
                d2 = 0.0
                for a in range(3):
                    d2 += (pos[i, a] - pos[j, a]) ** 2
                if per_pair:
                    b = scale * (rad[i] + rad[j]) + skin
                    ok = d2 < b * b
                else:
                    ok = d2 < r2
                if ok:
                    if sweep == 1:
                        tmp[m] = j
                    m += 1
            if sweep == 1:
                nbr[total:total + m] = np.sort(tmp[:m])
            total += m
            counts[i + 1] = total
    return counts, nbr


class NeighborGrid:
    """Uniform spatial hash over particle positions.

    ``query`` returns every particle in the 27 cells around a point, a
    superset of the particles within ``cell_size`` of it.
    """

    def __init__(self, positions, cell_size: float):
        if cell_size <= 0:
            raise ValueError("cell_size must be > 0")
        self.positions = np.ascontiguousarray(positions, dtype=np.float64)
        self.cell_size = float(cell_size)
        self.origin = self.positions.min(axis=0) - 1e-9 if len(self.positions) else np.zeros(3)
        self._ijk, self._dims, self._start, self._order = _grid_build(
            self.positions, self.origin, self.cell_size)

    def query(self, point, radius: float | None = None) -> np.ndarray:
        radius = self.cell_size if radius is None else radius
        if radius > self.cell_size:
            raise ValueError("query radius exceeds the cell size")
        p = np.asarray(point, dtype=np.float64)
        c = np.floor((p - self.origin) / self.cell_size).astype(np.int64)
        buf = np.empty(len(self.positions), np.int64)
        cnt = _grid_candidates(c[0], c[1], c[2], self._dims, self._start, self._order, buf)
        return np.sort(buf[:cnt])

    def within(self, point, radius: float) -> np.ndarray:
        cand = self.query(point, radius)
        d = np.linalg.norm(self.positions[cand] - np.asarray(point), axis=1)
        return cand[d < radius]


def neighbor_pairs(positions, radius: float) -> np.ndarray:
    """All pairs (i < j) closer than ``radius``, sorted lexicographically."""
    pos = np.ascontiguousarray(positions, dtype=np.float64)
    if len(pos) < 2:
        return np.empty((0, 2), np.int64)
    start, nbr = _neighbor_lists(pos, float(radius), pos.min(axis=0) - 1e-9)
    i = np.repeat(np.arange(len(pos)), np.diff(start))
    keep = nbr > i
    return np.stack([i[keep], nbr[keep]], axis=1)


# ---------------------------------------------------------------- force kernels


@nb.njit(cache=True)
def _splitmix(x):
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z = x
    z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    return z ^ (z >> np.uint64(31))


@nb.njit(cache=True)
def _jitter_direction(lo, hi, seed):
    h1 = _splitmix(np.uint64(lo) * np.uint64(1000003) + np.uint64(hi) + np.uint64(seed) * np.uint64(7919))
    h2 = _splitmix(h1)
    u1 = (h1 >> np.uint64(11)) * (1.0 / 9007199254740992.0)
    u2 = (h2 >> np.uint64(11)) * (1.0 / 9007199254740992.0)
    z = 2.0 * u1 - 1.0
    s = math.sqrt(max(0.0, 1.0 - z * z))
    phi = 2.0 * math.pi * u2
    return s * math.cos(phi), s * math.sin(phi), z


@nb.njit(cache=True)
def _pair_pass(pos, rad, ids, start, nbr, alpha, cutoff, jitter, seed, force, compress):
    """Pair forces and compressions from half lists (each pair listed once)."""
    n = pos.shape[0]
    total = np.zeros(n)
    force[:] = 0.0
    for i in range(n):
        for t in range(start[i], start[i + 1]):
            j = nbr[t]
            ex = pos[i, 0] - pos[j, 0]
            ey = pos[i, 1] - pos[j, 1]
            ez = pos[i, 2] - pos[j, 2]
            d = math.sqrt(ex * ex + ey * ey + ez * ez)
            rs = rad[i] + rad[j]
            if d > cutoff * rs:
                continue
            if d == 0.0:
                lo, hi = min(ids[i], ids[j]), max(ids[i], ids[j])
                ux, uy, uz = _jitter_direction(lo, hi, seed)
                if ids[i] > ids[j]:
                    ux, uy, uz = -ux, -uy, -uz
                d = jitter
            else:
                ux, uy, uz = ex / d, ey / d, ez / d
            h = 1.0 / (alpha * d / rs + (1.0 - alpha))
            h3 = h * h * h
            m = h3 * h3 - h3
            force[i, 0] += m * ux
            force[i, 1] += m * uy
            force[i, 2] += m * uz
            force[j, 0] -= m * ux
            force[j, 1] -= m * uy
            force[j, 2] -= m * uz
            am = abs(m)
            total[i] += am
            total[j] += am
    for i in range(n):
        fx, fy, fz = force[i, 0], force[i, 1], force[i, 2]
        compress[i] = max(total[i] - math.sqrt(fx * fx + fy * fy + fz * fz), 0.0)


@nb.njit(cache=True)
def _move_pass(pos, rad, force, step_scale, surf_step, cap_frac, ref, clearance, hint,
               tri_verts, triangles, face_normals, vertex_normals, tri_edges, edge_normals,
               node_lo, node_hi, node_left, node_right, node_start, node_count, order,
               new_pos, disp):
    n = pos.shape[0]
    for i in range(n):
        sx = pos[i, 0] + step_scale * force[i, 0]
        sy = pos[i, 1] + step_scale * force[i, 1]
        sz = pos[i, 2] + step_scale * force[i, 2]
        known_inside = False
        if clearance[i] > 0.0:
            dd = (sx - ref[i, 0]) ** 2 + (sy - ref[i, 1]) ** 2 + (sz - ref[i, 2]) ** 2
            known_inside = dd < clearance[i] * clearance[i]
        if not known_inside:
            q = query_point(sx, sy, sz, tri_verts, triangles, face_normals, vertex_normals,
                            tri_edges, edge_normals, node_lo, node_hi, node_left, node_right,
                            node_start, node_count, order, hint[i])
            hint[i] = q[0]
            dist = q[10]
            if q[11]:
                ref[i, 0], ref[i, 1], ref[i, 2] = sx, sy, sz
                clearance[i] = dist
            else:
                # surface push evaluated at the predicted point; a push that
                # would reach the surface stops on it (nearest point)
                if surf_step >= dist:
                    sx, sy, sz = q[1], q[2], q[3]
                else:
                    sx -= surf_step * q[4]
                    sy -= surf_step * q[5]
                    sz -= surf_step * q[6]
                clearance[i] = -1.0
        dx, dy, dz = sx - pos[i, 0], sy - pos[i, 1], sz - pos[i, 2]
        norm = math.sqrt(dx * dx + dy * dy + dz * dz)
        cap = cap_frac * rad[i]
        if norm > cap:
            f = cap / norm
            dx, dy, dz, norm = dx * f, dy * f, dz * f, cap
        new_pos[i, 0] = pos[i, 0] + dx
        new_pos[i, 1] = pos[i, 1] + dy
        new_pos[i, 2] = pos[i, 2] + dz
        disp[i] = norm


@nb.njit(cache=True)
def _radius_pass(rad, compress, ideal, eta, gain, r_min, r_max, out):
    """Radius update for all particles; returns the largest change."""
    worst = 0.0
    for i in range(rad.shape[0]):
        g = max(1.0 + eta * (compress[i] - ideal), 1e-3)
        r = min(max(rad[i] - gain * math.log(g), r_min), r_max)
        worst = max(worst, abs(r - rad[i]))
        out[i] = r
    return worst


@nb.njit(cache=True)
def _drift(pos, ref_pos, rad, ref_rad):
    moved = 0.0
    grown = 0.0
    for i in range(pos.shape[0]):
        d2 = 0.0
        for a in range(3):
            d2 += (pos[i, a] - ref_pos[i, a]) ** 2
        moved = max(moved, d2)
        grown = max(grown, rad[i] - ref_rad[i])
    return math.sqrt(moved), grown


# ---------------------------------------------------------------- state & stepping

STEP_CAP = 0.25  # per-step displacement cap, fraction of the particle radius


@dataclass
class SamplerState:
    """Positions and radii mid-run, plus the scale they were initialised with."""

    positions: np.ndarray
    radii: np.ndarray
    r0: float
    r_cap: float
    iteration: int = 0
    max_disp: float = math.inf
    max_dr: float = math.inf

    def copy(self) -> SamplerState:
        return replace(self, positions=self.positions.copy(), radii=self.radii.copy())


def init_particles(index: SurfaceIndex, N: int, seed: int = 0,
                   max_attempts: int | None = None) -> SamplerState:
    """Rejection-sample ``N`` points uniformly inside the surface."""
    if N < 1:
        raise ValueError("N must be >= 1")
    surface = index.surface
    vol = surface.volume()
    lo, hi = surface.bounds()
    rng = np.random.default_rng(seed)
    budget = max_attempts if max_attempts is not None else max(1000 * N, 100_000)
    got, drawn = [], 0
    need = N
    while need > 0:
        if drawn >= budget:
            raise SamplingError(
                f"rejection sampling placed {N - need} of {N} particles in {drawn} draws")
        batch = min(max(2 * need, 256), budget - drawn)
        pts = rng.uniform(lo, hi, size=(batch, 3))
        drawn += batch
        inside = pts[index.contains(pts)]
        got.append(inside[:need])
        need -= len(got[-1])
    pos = np.ascontiguousarray(np.concatenate(got))
    r0 = 0.5 * (vol / N) ** (1.0 / 3.0)
    r_cap = (3.0 * vol / (4.0 * math.pi)) ** (1.0 / 3.0)
    return SamplerState(pos, np.full(N, r0), r0, r_cap)


def _spread_bits(x):
    x = x.astype(np.uint64) & np.uint64(0x1FFFFF)
    for shift, mask in ((32, 0x1F00000000FFFF), (16, 0x1F0000FF0000FF),
                        (8, 0x100F00F00F00F00F), (4, 0x10C30C30C30C30C3),
                        (2, 0x1249249249249249)):
        x = (x | (x << np.uint64(shift))) & np.uint64(mask)
    return x


def spatial_order(positions, cell: float) -> np.ndarray:
    """Permutation visiting points along a Morton (Z-order) curve of ``cell``-sized cells."""
    pos = np.asarray(positions, dtype=np.float64)
    if len(pos) == 0:
        return np.zeros(0, np.int64)
    ijk = np.floor((pos - pos.min(axis=0)) / cell).astype(np.int64)
    key = (_spread_bits(ijk[:, 0]) | (_spread_bits(ijk[:, 1]) << np.uint64(1))
           | (_spread_bits(ijk[:, 2]) << np.uint64(2)))
    return np.argsort(key, kind="stable").astype(np.int64)


class Sampler:
    """Stepping engine; caches neighbour lists and inside certificates between steps."""

    def __init__(self, index: SurfaceIndex, params: SamplingParams, state: SamplerState,
                 ids=None):
        self.index = index
        self.params = params
        self.state = state
        # external particle ids; only used to seed the coincident-pair jitter
        self.ids = (np.arange(len(state.positions), dtype=np.int64) if ids is None
                    else np.asarray(ids, dtype=np.int64))
        self.ideal = ideal_compression(params.alpha)
        n = len(state.positions)
        self._ref = np.zeros((n, 3))
        self._clear = np.full(n, -1.0)
        self._list_pos = None
        self._list_rad = None
        self._hint = np.full(n, -1, np.int64)
        self._skin = 0.0
        self._start = np.zeros(n + 1, np.int64)
        self._nbr = np.empty(0, np.int64)
        self.force = np.zeros((n, 3))
        self.compress = np.zeros(n)

    def _refresh_lists(self):
        # Verlet lists: a pair is listed when d < cutoff * (r_i + r_j) + skin, so
        # the lists stay complete while 2 * (max move) + 2 * cutoff * (max radius
        # growth) stays below the skin.
        st, p = self.state, self.params
        if self._list_pos is not None:
            moved, grown = _drift(st.positions, self._list_pos, st.radii, self._list_rad)
            if 2.0 * moved + p.cutoff * 2.0 * grown < self._skin:
                return
        self._skin = 0.5 * float(st.radii.mean())
        reach = p.cutoff * 2.0 * float(st.radii.max()) + self._skin
        pos = st.positions
        self._start, self._nbr = _neighbor_lists(pos, reach, pos.min(axis=0) - 1e-9,
                                                 st.radii, p.cutoff, self._skin, True)
        self._list_pos = pos.copy()
        self._list_rad = st.radii.copy()

    def evaluate(self):
        """Pair forces and compressions for the current snapshot."""
        self._refresh_lists()
        st, p = self.state, self.params
        _pair_pass(st.positions, st.radii, self.ids, self._start, self._nbr, p.alpha, p.cutoff,
                   1e-6 * st.r0, p.seed, self.force, self.compress)
        return self.force, self.compress

    def step(self) -> SamplerState:
        st, p = self.state, self.params
        self.evaluate()
        new_pos = np.empty_like(st.positions)
        disp = np.empty(len(st.positions))
        unit = p.dt / p.mass * st.r0
        _move_pass(st.positions, st.radii, self.force, unit, unit * p.mu, STEP_CAP,
                   self._ref, self._clear, self._hint, *self.index.arrays, new_pos, disp)
        radii = np.empty_like(st.radii)
        st.max_dr = _radius_pass(st.radii, self.compress, self.ideal, p.eta,
                                 p.radius_gain * st.r0, 1e-6 * st.r0, st.r_cap, radii)
        st.max_disp = float(disp.max()) if len(disp) else 0.0
        st.positions = new_pos
        st.radii = radii
        st.iteration += 1
        return st

    def converged(self) -> bool:
        st, p = self.state, self.params
        rbar = float(st.radii.mean())
        return st.max_disp < p.tol_disp * rbar and st.max_dr < p.tol_radius * rbar


def total_force(i: int, state: SamplerState, index: SurfaceIndex,
                params: SamplingParams) -> np.ndarray:
    """Surface push times ``mu`` plus the in-range pair forces on particle ``i``."""
    eng = Sampler(index, params, state)
    force, _ = eng.evaluate()
    q = index.query(state.positions[i])
    return params.mu * surface_force(q) + force[i]


def compression_magnitude(i: int, state: SamplerState, index: SurfaceIndex,
                          params: SamplingParams) -> float:
    eng = Sampler(index, params, state)
    _, comp = eng.evaluate()
    return float(comp[i])


def sampling_step(state: SamplerState, params: SamplingParams,
                  index: SurfaceIndex) -> SamplerState:
    """One explicit step on a copy of ``state``."""
    return Sampler(index, params, state.copy()).step()


# ---------------------------------------------------------------- connections & output


class ConnectionGraph:
    """Symmetric, irreflexive adjacency stored as sorted ``(i, j)`` pairs with i < j."""

    def __init__(self, n: int, edges):
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if len(e):
            if np.any(e[:, 0] >= e[:, 1]):
                raise ValueError("edges must satisfy i < j")
            if e.min() < 0 or e.max() >= n:
                raise ValueError("edge references a missing particle")
            order = np.lexsort((e[:, 1], e[:, 0]))
            e = e[order]
            if np.any(np.all(e[1:] == e[:-1], axis=1)):
                raise ValueError("duplicate edge")
        self.n = int(n)
        self.edges = np.ascontiguousarray(e)
        src = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        dst = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        order = np.lexsort((dst, src))
        self.src = src[order]
        self.dst = dst[order]
        self.indptr = np.zeros(self.n + 1, np.int64)
        np.cumsum(np.bincount(self.src, minlength=self.n), out=self.indptr[1:])

    def neighbors(self, i: int) -> np.ndarray:
        return self.dst[self.indptr[i]:self.indptr[i + 1]]

    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    def __len__(self):
        return len(self.edges)

    def __eq__(self, other):
        return (isinstance(other, ConnectionGraph) and self.n == other.n
                and np.array_equal(self.edges, other.edges))


def build_connections(positions, radii, connect: float) -> ConnectionGraph:
    """Edge (i, j) iff ``|p_i - p_j| < connect * (r_i + r_j)``."""
    pos = np.ascontiguousarray(positions, dtype=np.float64)
    rad = np.asarray(radii, dtype=np.float64)
    n = len(pos)
    if n < 2:
        return ConnectionGraph(n, np.empty((0, 2), np.int64))
    cand = neighbor_pairs(pos, connect * 2.0 * float(rad.max()) * (1 + 1e-12))
    if len(cand) == 0:
        return ConnectionGraph(n, cand)
    d = np.linalg.norm(pos[cand[:, 0]] - pos[cand[:, 1]], axis=1)
    keep = d < connect * (rad[cand[:, 0]] + rad[cand[:, 1]])
    return ConnectionGraph(n, cand[keep])


@dataclass
class SurfaceBindings:
    """Anchor of each surface particle on its nearest triangle.

    ``barycentric`` locates the particle's projection onto the triangle's
    plane (coordinates may be negative when the nearest point is on an edge
    or vertex); ``offset`` is the signed distance along the face normal, so
    ``sum(b_k v_k) + offset * n`` rebuilds the particle exactly.
    """

    particle: np.ndarray
    triangle: np.ndarray
    barycentric: np.ndarray
    offset: np.ndarray

    def __len__(self):
        return len(self.particle)

    def points_on(self, surface: TriangleSurface) -> np.ndarray:
        tv = surface.vertices[surface.triangles[self.triangle]]  # (B, 3, 3)
        base = np.einsum("bk,bkd->bd", self.barycentric, tv)
        return base + self.offset[:, None] * surface.normals[self.triangle]


def plane_barycentric(tv: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of points projected into each triangle's plane."""
    a, b, c = tv[:, 0], tv[:, 1], tv[:, 2]
    v0, v1, v2 = b - a, c - a, points - a
    d00 = np.einsum("ij,ij->i", v0, v0)
    d01 = np.einsum("ij,ij->i", v0, v1)
    d11 = np.einsum("ij,ij->i", v1, v1)
    d20 = np.einsum("ij,ij->i", v2, v0)
    d21 = np.einsum("ij,ij->i", v2, v1)
    den = d00 * d11 - d01 * d01
    v = (d11 * d20 - d01 * d21) / den
    w = (d00 * d21 - d01 * d20) / den
    return np.stack([1.0 - v - w, v, w], axis=1)


def classify_surface_particles(positions, radii, index: SurfaceIndex, beta: float = 0.75):
    """Label particles within ``beta * r_i`` of the surface and bind them to it."""
    pos = np.asarray(positions, dtype=np.float64)
    q = query_many(index, pos)
    kinds = np.where(q["distance"] < beta * np.asarray(radii), SURFACE, INTERNAL).astype(np.int8)
    ids = np.flatnonzero(kinds == SURFACE)
    if len(ids) == 0:
        raise SamplingError("no surface particles; deformation would be unconstrained")
    tri = q["triangle"][ids]
    surf = index.surface
    tv = surf.vertices[surf.triangles[tri]]
    bary = plane_barycentric(tv, pos[ids])
    base = np.einsum("bk,bkd->bd", bary, tv)
    offset = np.einsum("ij,ij->i", pos[ids] - base, surf.normals[tri])
    return kinds, SurfaceBindings(ids.astype(np.int64), tri.astype(np.int64), bary, offset)


def spacing_histogram(positions, radii, pairs, bins=None):
    pos, rad = np.asarray(positions), np.asarray(radii)
    if bins is None:
        bins = np.round(np.arange(0.0, 1.0 + 1e-9, 0.025), 6)
    if len(pairs) == 0:
        return np.asarray(bins, dtype=np.float64), np.zeros(len(bins) - 1, np.int64)
    d = np.linalg.norm(pos[pairs[:, 0]] - pos[pairs[:, 1]], axis=1)
    ratio = d / (rad[pairs[:, 0]] + rad[pairs[:, 1]])
    counts, edges = np.histogram(ratio, bins=bins)
    return edges, counts


@dataclass
class SampledState:
    """Converged sampling: the zero-force reference for deformation."""

    params: SamplingParams
    mesh_hash: str
    positions: np.ndarray
    radii: np.ndarray
    kinds: np.ndarray
    graph: ConnectionGraph
    bindings: SurfaceBindings
    diagnostics: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.positions)

    def particles(self) -> list[Particle]:
        return [Particle(i, self.positions[i], float(self.radii[i]), KIND_NAMES[k])
                for i, k in enumerate(self.kinds)]

    def diameter(self) -> float:
        return float(np.linalg.norm(np.ptp(self.positions, axis=0)))


RelaxState = SampledState


def run_sampling(surface: TriangleSurface | SurfaceIndex, params: SamplingParams,
                 callback=None) -> SampledState:
    """Sample, relax to equilibrium, classify surface particles and connect.

    Hitting ``max_iters`` is not fatal; ``diagnostics['converged']`` is False.
    """
    index = surface if isinstance(surface, SurfaceIndex) else build_index(surface)
    state = init_particles(index, params.N, params.seed)
    # relax in a spatially coherent order (much friendlier to the cache)
    perm = spatial_order(state.positions, 2.0 * state.r0)
    state.positions = np.ascontiguousarray(state.positions[perm])
    state.radii = state.radii[perm]
    eng = Sampler(index, params, state, ids=perm)
    converged = False
    while state.iteration < params.max_iters:
        eng.step()
        if callback is not None:
            callback(state.iteration, state.max_disp, state.max_dr)
        if eng.converged():
            converged = True
            break
    # output ids follow the Z-order of the final positions, so neighbours stay
    # close in memory for everything downstream (deformation in particular)
    final = spatial_order(state.positions, 2.0 * float(state.radii.mean()))
    pos = np.ascontiguousarray(state.positions[final])
    rad = state.radii[final].copy()
    kinds, bindings = classify_surface_particles(pos, rad, index, params.surface_band)
    graph = build_connections(pos, rad, params.connect)
    deg = graph.degree()
    sd = index.signed_distance(pos)
    in_range = neighbor_pairs(pos, params.cutoff * 2.0 * float(rad.max()))
    if len(in_range):
        d = np.linalg.norm(pos[in_range[:, 0]] - pos[in_range[:, 1]], axis=1)
        in_range = in_range[d < params.cutoff * (rad[in_range[:, 0]] + rad[in_range[:, 1]])]
    bins, counts = spacing_histogram(pos, rad, in_range,
                                     np.round(np.linspace(0.0, params.cutoff, 41), 6))
    diagnostics = {
        "converged": converged,
        "iterations": int(state.iteration),
        "max_displacement": float(state.max_disp) if state.iteration else 0.0,
        "max_radius_change": float(state.max_dr) if state.iteration else 0.0,
        "r0": float(state.r0),
        "mean_radius": float(rad.mean()),
        "inside_violations": int(np.count_nonzero(sd > 0.05 * rad)),
        "surface_particles": int(np.count_nonzero(kinds == SURFACE)),
        "edges": int(len(graph)),
        "isolated": int(np.count_nonzero(deg == 0)),
        "underconnected": int(np.count_nonzero(deg < 3)),
        "spacing_bins": [float(b) for b in bins],
        "spacing_counts": [int(c) for c in counts],
    }
    return SampledState(params, index.surface.content_hash(), pos, rad, kinds, graph,
                        bindings, diagnostics)
