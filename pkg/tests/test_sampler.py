import math

import numpy as np
import pytest

from tissuesim.index import build_index
from tissuesim.sampler import (INTERNAL, SURFACE, NeighborGrid, Particle, SamplerState,
                               SamplingError, SamplingParams, Sampler, build_connections,
                               classify_surface_particles, compression_magnitude,
                               ideal_compression, imf_magnitude, init_particles, neighbor_pairs,
                               pair_force, radius_increment, run_sampling, sampling_step,
                               surface_force, total_force, update_radius)
from tissuesim.surface import make_phantom


def _p(i, pos, r=1.0):
    return Particle(i, np.asarray(pos, dtype=float), r)


def _state(pos, r=1.0, r0=None):
    pos = np.asarray(pos, dtype=float).reshape(-1, 3)
    rad = np.full(len(pos), r) if np.isscalar(r) else np.asarray(r, float)
    return SamplerState(pos, rad, r0 if r0 is not None else float(rad.mean()), 1e9)


BIG = build_index(make_phantom("sphere", 100.0, 2))


def _icosahedron(scale):
    g = (1 + 5 ** 0.5) / 2
    v = np.array([[-1, g, 0], [1, g, 0], [-1, -g, 0], [1, -g, 0],
                  [0, -1, g], [0, 1, g], [0, -1, -g], [0, 1, -g],
                  [g, 0, -1], [g, 0, 1], [-g, 0, -1], [-g, 0, 1]], float)
    return scale * v / np.linalg.norm(v[0])


class TestPairForce:
    def test_zero_at_contact(self):
        assert np.allclose(pair_force(_p(0, [0, 0, 0]), _p(1, [2, 0, 0])), 0, atol=1e-15)

    def test_repulsive_example(self):
        f = pair_force(_p(0, [0, 0, 0]), _p(1, [1.5, 0, 0]))
        assert f[0] == pytest.approx(-0.735475, abs=1e-6)
        assert np.allclose(f[1:], 0)

    def test_attractive_example(self):
        f = pair_force(_p(0, [0, 0, 0]), _p(1, [8, 0, 0]), cutoff=None)
        assert f[0] == pytest.approx(0.059904, abs=1e-6)

    def test_cutoff(self):
        assert np.all(pair_force(_p(0, [0, 0, 0]), _p(1, [8, 0, 0]), cutoff=2.0) == 0)

    def test_antisymmetry(self, rng):
        for _ in range(200):
            a = _p(0, rng.normal(size=3), rng.uniform(0.2, 2))
            b = _p(1, rng.normal(size=3), rng.uniform(0.2, 2))
            assert np.array_equal(pair_force(a, b, cutoff=None), -pair_force(b, a, cutoff=None))

    def test_sign_structure(self):
        for d in (0.3, 1.0, 1.9):
            assert pair_force(_p(0, [0, 0, 0]), _p(1, [d, 0, 0]))[0] < 0  # pushed away from j
        for d in (2.1, 3.0, 3.9):
            assert pair_force(_p(0, [0, 0, 0]), _p(1, [d, 0, 0]))[0] > 0

    def test_range_decay(self):
        d = np.linspace(4.0, 40.0, 200)
        mag = np.abs(imf_magnitude(d / 2.0))
        assert np.all(np.diff(mag) < 0)

    def test_coincident_pair_is_separated(self):
        a, b = _p(3, [1, 1, 1]), _p(7, [1, 1, 1])
        fa, fb = pair_force(a, b), pair_force(b, a)
        assert np.linalg.norm(fa) > 0
        assert np.allclose(fa, -fb)
        assert np.array_equal(fa, pair_force(a, b))


class TestScalars:
    def test_ideal_compression(self):
        assert ideal_compression(0.5) == pytest.approx(8.8257, abs=1e-4)
        assert 12 * 0.735475 == pytest.approx(ideal_compression(0.5), abs=1e-4)

    def test_ideal_ordering_in_alpha(self):
        # h = 1 / (1 - alpha / 4) at the packing spacing grows with alpha, and so
        # does h**6 - h**3 for h > 1
        assert ideal_compression(0.4) < ideal_compression(0.5) < ideal_compression(0.6)

    def test_ideal_bad_alpha(self):
        with pytest.raises(ValueError):
            ideal_compression(1.0)

    def test_radius_increment_examples(self):
        ideal = ideal_compression()
        assert radius_increment(ideal, ideal, 0.05) == pytest.approx(0.0, abs=1e-15)
        # 0.58210 comes from the rounded argument 0.55872; unrounded it is 0.582117
        assert radius_increment(0.0, ideal, 0.05) == pytest.approx(0.58210, abs=5e-5)
        assert radius_increment(ideal + 20, ideal, 0.05) == pytest.approx(-0.69315, abs=1e-5)

    def test_radius_increment_clamped(self):
        assert radius_increment(-1e9, 8.8, 0.05) == pytest.approx(-math.log(1e-3))

    def test_update_radius(self):
        p = SamplingParams()
        assert update_radius(0.5, ideal_compression(), p, 0.5) == 0.5
        assert update_radius(0.5, 0.0, p, 0.5) == pytest.approx(0.5 + 0.05 * 0.58210, abs=1e-6)
        assert update_radius(1e-7, 1e6, p, 1.0) == pytest.approx(1e-6)

    def test_surface_force(self, sphere_index):
        assert np.all(surface_force(sphere_index.query((0, 0, 0))) == 0)
        f = surface_force(sphere_index.query((0, 0, 3)))
        assert np.allclose(f, (0, 0, -1))
        assert np.all(surface_force(sphere_index.query((0, 0, 1))) == 0)

    def test_params_validation(self):
        with pytest.raises(ValueError):
            SamplingParams(alpha=1.5)
        with pytest.raises(ValueError):
            SamplingParams(connect=1.2, cutoff=1.0)
        with pytest.raises(ValueError):
            SamplingParams(N=0)


class TestForcesOnState:
    def test_single_particle(self):
        p = SamplingParams(N=1)
        assert np.all(total_force(0, _state([[0, 0, 0]]), BIG, p) == 0)
        f = total_force(0, _state([[0, 0, 150]]), BIG, p)
        assert np.linalg.norm(f) == pytest.approx(p.mu)
        assert f[2] < 0

    def test_contact_pair(self):
        st = _state([[0, 0, 0], [2, 0, 0]])
        assert np.allclose(total_force(0, st, BIG, SamplingParams()), 0, atol=1e-15)

    def test_compression_examples(self):
        p = SamplingParams()
        assert compression_magnitude(0, _state([[0, 0, 0]]), BIG, p) == 0
        assert compression_magnitude(0, _state([[0, 0, 0], [1.5, 0, 0]]), BIG, p) == \
            pytest.approx(0.0, abs=1e-12)
        st = _state([[0, 0, 0], [1.5, 0, 0], [-1.5, 0, 0]])
        assert compression_magnitude(0, st, BIG, p) == pytest.approx(1.47095, abs=1e-5)
        assert np.allclose(total_force(0, st, BIG, p), 0, atol=1e-12)

    def test_engine_matches_pairwise_sum(self, rng):
        pos = rng.uniform(-3, 3, size=(60, 3))
        rad = rng.uniform(0.4, 0.8, size=60)
        st = _state(pos, rad)
        p = SamplingParams()
        force, comp = Sampler(BIG, p, st).evaluate()
        parts = [_p(i, pos[i], rad[i]) for i in range(60)]
        for i in range(60):
            fs = [pair_force(parts[i], parts[j], p.alpha, p.cutoff) for j in range(60) if j != i]
            assert np.allclose(force[i], np.sum(fs, axis=0), atol=1e-12)
            tot = sum(np.linalg.norm(f) for f in fs)
            assert comp[i] == pytest.approx(max(tot - np.linalg.norm(np.sum(fs, axis=0)), 0),
                                            abs=1e-10)


class TestStep:
    def test_zero_force_unchanged(self):
        p = SamplingParams(N=2)
        st = _state([[0, 0, 0], [2, 0, 0]])
        out = sampling_step(st, p, BIG)
        assert np.array_equal(out.positions, st.positions)

    def test_outside_particle_moves_inward_by_cap(self):
        p = SamplingParams(N=1)
        st = _state([[0, 0, 110]], r=1.0)
        out = sampling_step(st, p, BIG)
        assert out.positions[0, 2] == pytest.approx(110 - 0.25)

    def test_overlapping_pair_separates(self):
        st = _state([[0, 0, 0], [1, 0, 0]])
        out = sampling_step(st, SamplingParams(N=2), BIG)
        assert np.linalg.norm(out.positions[1] - out.positions[0]) > 1.0

    def test_step_is_capped(self):
        st = _state([[0, 0, 0], [0.01, 0, 0]])
        out = sampling_step(st, SamplingParams(N=2), BIG)
        assert np.all(np.linalg.norm(out.positions - st.positions, axis=1) <= 0.25 + 1e-12)

    def test_icosahedral_cluster_feedback(self):
        # an isolated 13-particle cluster inflates until the centre sits near
        # the ideal close-packing compression
        pos = np.vstack([np.zeros(3), _icosahedron(3.0)])
        st = _state(pos, r=1.0, r0=1.0)
        p = SamplingParams(N=13)
        eng = Sampler(BIG, p, st)
        for _ in range(8000):
            eng.step()
        _, comp = eng.evaluate()
        assert abs(comp[0] - ideal_compression()) < 0.5


class TestNeighbours:
    def test_grid_matches_brute_force(self, rng):
        pos = rng.uniform(0, 5, size=(400, 3))
        for radius in (0.3, 0.7, 1.5):
            grid = NeighborGrid(pos, radius)
            d = np.linalg.norm(pos[:, None] - pos[None], axis=2)
            for i in range(0, 400, 37):
                ref = np.flatnonzero(d[i] < radius)
                assert set(ref) <= set(grid.query(pos[i], radius))
            got = neighbor_pairs(pos, radius)
            ii, jj = np.nonzero(np.triu(d < radius, 1))
            assert np.array_equal(got, np.stack([ii, jj], axis=1))

    def test_connection_examples(self):
        g = build_connections([[0, 0, 0], [1.0, 0, 0]], [1, 1], 0.6)
        assert len(g) == 1
        g = build_connections([[0, 0, 0], [1.3, 0, 0]], [1, 1], 0.6)
        assert len(g) == 0

    def test_connections_symmetric(self, rng):
        pos = rng.uniform(0, 3, size=(200, 3))
        g = build_connections(pos, np.full(200, 0.3), 0.9)
        for i in range(200):
            for j in g.neighbors(i):
                assert i in g.neighbors(j) and i != j
        d = np.linalg.norm(pos[:, None] - pos[None], axis=2)
        assert len(g) == np.count_nonzero(np.triu(d < 0.54, 1))


class TestInit:
    def test_unit_cube(self):
        ix = build_index(make_phantom("box", 1.0, 0))
        st = init_particles(ix, 1000, seed=4)
        assert st.r0 == pytest.approx(0.05)
        assert ix.contains(st.positions).all()

    def test_tiny_and_deterministic(self, sphere_index):
        a = init_particles(sphere_index, 4, seed=1)
        b = init_particles(sphere_index, 4, seed=1)
        assert len(a.positions) == 4 and np.array_equal(a.positions, b.positions)

    def test_rejection_budget(self, sphere_index):
        with pytest.raises(SamplingError):
            init_particles(sphere_index, 50, seed=0, max_attempts=10)


class TestRun:
    def test_small_run(self, small_relax, sphere_index):
        d = small_relax.diagnostics
        assert small_relax.n == 300 and d["converged"]
        assert d["inside_violations"] == 0
        sd = sphere_index.signed_distance(small_relax.positions)
        assert np.all(sd <= 0.05 * small_relax.radii)
        e = small_relax.graph.edges
        ratio = (np.linalg.norm(small_relax.positions[e[:, 0]] - small_relax.positions[e[:, 1]],
                                axis=1) / (small_relax.radii[e[:, 0]] + small_relax.radii[e[:, 1]]))
        assert np.all(ratio < small_relax.params.connect)
        assert np.median(ratio) == pytest.approx(0.75, abs=0.05)

    def test_deterministic(self, sphere_index, small_relax):
        again = run_sampling(sphere_index, SamplingParams(N=300, seed=0))
        assert np.array_equal(again.positions, small_relax.positions)
        assert np.array_equal(again.radii, small_relax.radii)
        assert again.graph == small_relax.graph

    def test_single_particle(self, sphere_index):
        s = run_sampling(sphere_index, SamplingParams(N=1, max_iters=50))
        assert sphere_index.contains(s.positions).all()
        assert s.radii[0] > s.diagnostics["r0"]

    def test_classification(self, small_relax, sphere_index):
        q = sphere_index.signed_distance(small_relax.positions)
        expect = np.where(np.abs(q) < 0.75 * small_relax.radii, SURFACE, INTERNAL)
        assert np.array_equal(small_relax.kinds, expect)
        rebuilt = small_relax.bindings.points_on(sphere_index.surface)
        assert np.allclose(rebuilt, small_relax.positions[small_relax.bindings.particle],
                           atol=1e-12)

    def test_classify_example(self):
        ix = build_index(make_phantom("sphere", 10.0, 3))
        pos = np.array([[0, 0, 0], [0, 0, 9.5]])
        kinds, b = classify_surface_particles(pos, [1.0, 1.0], ix)
        assert list(kinds) == [INTERNAL, SURFACE]
        with pytest.raises(SamplingError):
            classify_surface_particles(pos[:1], [1.0], ix)
