"""Hand-built relax states for unit tests."""
import numpy as np

from tissuesim.sampler import (INTERNAL, SURFACE, ConnectionGraph, SampledState,
                               SamplingParams, SurfaceBindings)


def make_relax(positions, edges, surface_ids=(), radius=0.5):
    pos = np.asarray(positions, dtype=float)
    n = len(pos)
    kinds = np.full(n, INTERNAL, np.int8)
    sid = np.asarray(sorted(surface_ids), dtype=np.int64)
    kinds[sid] = SURFACE
    m = len(sid)
    bindings = SurfaceBindings(sid, np.zeros(m, np.int64), np.tile([1.0, 0, 0], (m, 1)),
                               np.zeros(m))
    e = np.array(sorted((min(a, b), max(a, b)) for a, b in edges), dtype=np.int64)
    return SampledState(SamplingParams(N=n), "test", pos, np.full(n, radius), kinds,
                        ConnectionGraph(n, e.reshape(-1, 2)), bindings, {})


def icosahedron(scale=1.0):
    g = (1 + 5 ** 0.5) / 2
    v = np.array([[-1, g, 0], [1, g, 0], [-1, -g, 0], [1, -g, 0],
                  [0, -1, g], [0, 1, g], [0, -1, -g], [0, 1, -g],
                  [g, 0, -1], [g, 0, 1], [-g, 0, -1], [-g, 0, 1]], float)
    return scale * v / np.linalg.norm(v[0])


def icosahedral_cluster(scale=1.0):
    """Centre particle 0 plus a 12-particle shell; shell neighbours are connected."""
    pos = np.vstack([np.zeros(3), icosahedron(scale)])
    d = np.linalg.norm(pos[:, None] - pos[None], axis=2)
    edges = [(0, k) for k in range(1, 13)]
    edges += [(a, b) for a in range(1, 13) for b in range(a + 1, 13) if d[a, b] < 1.1 * scale]
    return make_relax(pos, edges, surface_ids=range(1, 13))


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q
