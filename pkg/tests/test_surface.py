import numpy as np
import pytest

from tissuesim.surface import (AffineMap, MeshError, TriangleSurface, box_mesh, icosphere,
                               load_mesh, make_phantom, rotation_matrix, save_mesh)

CUBE_OBJ = """\
v -0.5 -0.5 -0.5
v 0.5 -0.5 -0.5
v 0.5 0.5 -0.5
v -0.5 0.5 -0.5
v -0.5 -0.5 0.5
v 0.5 -0.5 0.5
v 0.5 0.5 0.5
v -0.5 0.5 0.5
f 1 3 2
f 1 4 3
f 5 6 7
f 5 7 8
f 1 2 6
f 1 6 5
f 2 3 7
f 2 7 6
f 3 4 8
f 3 8 7
f 4 1 5
f 4 5 8
"""


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestLoading:
    def test_cube_obj_has_axis_normals(self, tmp_path):
        s = load_mesh(_write(tmp_path, "cube.obj", CUBE_OBJ))
        assert s.n_vertices == 8 and s.n_triangles == 12
        assert s.volume() == pytest.approx(1.0)
        # every normal is a signed unit axis vector, pointing away from the centre
        assert np.allclose(np.abs(s.normals).max(axis=1), 1.0)
        centroids = s.vertices[s.triangles].mean(axis=1)
        assert np.all(np.einsum("ij,ij->i", s.normals, centroids) > 0)

    def test_icosphere_two_subdivisions(self, tmp_path):
        v, t = icosphere(2)
        save_mesh(TriangleSurface(v, t), tmp_path / "ico.obj")
        s = load_mesh(tmp_path / "ico.obj")
        assert s.n_triangles == 320

    def test_open_cube_rejected(self, tmp_path):
        text = "\n".join(CUBE_OBJ.splitlines()[:-1]) + "\n"
        with pytest.raises(MeshError, match="open surface"):
            load_mesh(_write(tmp_path, "open.obj", text))

    def test_flipped_winding_rejected(self):
        v, t = box_mesh(0)
        with pytest.raises(MeshError, match="inward"):
            TriangleSurface(v, t[:, ::-1])

    def test_inconsistent_winding_rejected(self):
        v, t = box_mesh(0)
        t = t.copy()
        t[0] = t[0, ::-1]
        with pytest.raises(MeshError):
            TriangleSurface(v, t)

    def test_degenerate_triangle_rejected(self):
        v = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]], float)
        with pytest.raises(MeshError, match="degenerate"):
            TriangleSurface(v, np.array([[0, 1, 2], [0, 2, 1]]))

    def test_obj_slash_and_negative_indices(self, tmp_path):
        lines = CUBE_OBJ.splitlines()
        faces = [ln for ln in lines if ln.startswith("f")]
        verts = [ln for ln in lines if ln.startswith("v")]
        rewritten = []
        for f in faces:
            a, b, c = (int(x) for x in f.split()[1:])
            rewritten.append(f"f {a}/{a}/{a} {b - 9} {c}//{c}")
        s = load_mesh(_write(tmp_path, "c.obj", "\n".join(verts + ["vn 0 0 1"] + rewritten)))
        ref = load_mesh(_write(tmp_path, "ref.obj", CUBE_OBJ))
        assert np.array_equal(s.triangles, ref.triangles)

    def test_quad_face_is_an_error(self, tmp_path):
        with pytest.raises(MeshError, match="line 9"):
            load_mesh(_write(tmp_path, "q.obj", CUBE_OBJ.replace("f 1 3 2", "f 1 3 2 4")))

    def test_off_round_trip(self, tmp_path):
        s = make_phantom("ellipsoid", (1.0, 0.7, 0.4), 2)
        save_mesh(s, tmp_path / "e.off")
        back = load_mesh(tmp_path / "e.off")
        assert np.array_equal(back.vertices, s.vertices)
        assert back.content_hash() == s.content_hash()

    def test_obj_round_trip_is_bit_exact(self, tmp_path):
        s = make_phantom("sphere", 1.0, 3)
        save_mesh(s, tmp_path / "s.obj")
        assert load_mesh(tmp_path / "s.obj").content_hash() == s.content_hash()

    @pytest.mark.parametrize("text", ["", "OFF\n8 12 0\n0 0 0\n", "COFF\n"])
    def test_bad_off(self, tmp_path, text):
        with pytest.raises(MeshError):
            load_mesh(_write(tmp_path, "bad.off", text))

    def test_unknown_format(self, tmp_path):
        with pytest.raises(MeshError, match="unsupported"):
            load_mesh(_write(tmp_path, "x.stl", "solid"))


class TestPhantoms:
    def test_sphere_subdivision_count(self):
        assert make_phantom("sphere", 1.0, 3).n_triangles == 1280

    def test_volumes_converge(self):
        s = make_phantom("sphere", 2.0, 4)
        assert s.volume() == pytest.approx(4 / 3 * np.pi * 8, rel=5e-3)
        assert make_phantom("box", (1, 2, 3), 2).volume() == pytest.approx(6.0)

    def test_rigid_shift(self):
        s = make_phantom("sphere", 1.0, 2)
        moved = make_phantom("sphere", 1.0, 2, AffineMap.rigid(np.eye(3), (1, 0, 0)))
        assert np.allclose(moved.vertices - s.vertices, [1, 0, 0])
        assert s.same_topology(moved)

    def test_affine_squash_scales_z(self):
        s = make_phantom("ellipsoid", (1, 1, 1), 2)
        sq = make_phantom("ellipsoid", (1, 1, 1), 2, AffineMap.affine(np.diag([1, 1, 0.9])))
        assert np.ptp(sq.vertices[:, 2]) == pytest.approx(0.9 * np.ptp(s.vertices[:, 2]))
        assert np.array_equal(sq.triangles, s.triangles)

    def test_singular_affine_rejected(self):
        with pytest.raises(MeshError, match="invertible"):
            make_phantom("sphere", 1.0, 1, AffineMap.affine(np.diag([1, 1, 0])))

    def test_mirror_rejected(self):
        with pytest.raises(MeshError, match="orientation"):
            make_phantom("sphere", 1.0, 1, AffineMap.affine(np.diag([1, 1, -1])))

    def test_bad_kind_and_dims(self):
        with pytest.raises(MeshError):
            make_phantom("torus")
        with pytest.raises(MeshError):
            make_phantom("sphere", (1, 2, 3))
        with pytest.raises(MeshError):
            make_phantom("box", (1, -1, 1))

    def test_box_subdivision_is_watertight(self):
        s = make_phantom("box", 1.0, 3)
        assert s.n_triangles == 12 * 9
        assert s.volume() == pytest.approx(1.0)

    def test_rigid_requires_rotation(self):
        with pytest.raises(MeshError):
            AffineMap.rigid(np.diag([1, 1, 2]))
        r = rotation_matrix((0, 0, 1), 90)
        assert np.allclose(r @ [1, 0, 0], [0, 1, 0])
        assert np.allclose(AffineMap.rigid(r, (1, 2, 3))([[1, 0, 0]]), [[1, 3, 3]])
