import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from currentglm.errors import DataError, MeshFormatError
from currentglm.geometry import TriMesh, load_mesh, triangle_descriptors, write_off
from currentglm.synthcorp import icosphere


def test_single_triangle_descriptor():
    m = TriMesh([[0, 0, 0], [3, 0, 0], [0, 3, 0]], [[0, 1, 2]])
    d = triangle_descriptors(m)
    np.testing.assert_allclose(d.centers, [[1, 1, 0]])
    np.testing.assert_allclose(d.area_vectors, [[0, 0, 9]])
    assert d.n_degenerate == 0


def test_degenerate_triangle_has_zero_vector():
    m = TriMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])
    d = triangle_descriptors(m)
    np.testing.assert_array_equal(d.area_vectors, [[0, 0, 0]])
    assert d.n_degenerate == 1


def test_flip_negates_area_vectors(tetra):
    a = triangle_descriptors(tetra)
    b = triangle_descriptors(tetra.flipped())
    np.testing.assert_allclose(b.area_vectors, -a.area_vectors)
    np.testing.assert_allclose(b.centers, a.centers)


def test_closed_surface_sums_to_zero(tetra):
    d = triangle_descriptors(tetra)
    assert np.linalg.norm(d.area_vectors.sum(0)) <= 1e-12


def test_tetra_outward_volume(tetra):
    # divergence theorem: V = (1/6) sum x_j . tau_j for a closed outward mesh
    d = triangle_descriptors(tetra)
    vol = np.sum(d.centers * d.area_vectors) / 6.0
    assert vol == pytest.approx(1 / 6)


def test_load_minimal_off(tmp_path):
    p = tmp_path / "m.off"
    p.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")
    m = load_mesh(p)
    assert m.n_triangles == 1
    assert m.label == "m"


def test_off_too_few_vertices(tmp_path):
    p = tmp_path / "bad.off"
    p.write_text("OFF\n4 1 0\n0 0 0\n1 0 0\n0 1 0\n")
    with pytest.raises(MeshFormatError) as e:
        load_mesh(p)
    assert "4 vertices" in str(e.value)
    assert e.value.lineno is not None


def test_off_quad_rejected_with_line(tmp_path):
    p = tmp_path / "q.off"
    p.write_text("OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n")
    with pytest.raises(MeshFormatError) as e:
        load_mesh(p)
    assert e.value.lineno == 7


def test_off_index_out_of_range(tmp_path):
    p = tmp_path / "r.off"
    p.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 5\n")
    with pytest.raises(MeshFormatError):
        load_mesh(p)


def test_obj_with_slashes_and_comments(tmp_path):
    p = tmp_path / "m.obj"
    p.write_text("# c\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1\n")
    m = load_mesh(p)
    np.testing.assert_array_equal(m.triangles, [[0, 1, 2]])


def test_obj_bad_index(tmp_path):
    p = tmp_path / "m.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 4\n")
    with pytest.raises(MeshFormatError) as e:
        load_mesh(p)
    assert e.value.lineno == 4


def test_unknown_format(tmp_path):
    p = tmp_path / "m.ply"
    p.write_text("ply\n")
    with pytest.raises(DataError):
        load_mesh(p)


def test_icosphere_roundtrip_and_invariants(tmp_path):
    v, t = icosphere(2)
    mesh = TriMesh(v, t, "ico")
    p = tmp_path / "ico.off"
    write_off(mesh, p)
    again = load_mesh(p)
    assert again.n_triangles == 320
    np.testing.assert_array_equal(again.vertices, mesh.vertices)
    np.testing.assert_array_equal(again.triangles, mesh.triangles)
    d = triangle_descriptors(again)
    mass = np.linalg.norm(d.area_vectors, axis=1).sum()
    assert np.linalg.norm(d.area_vectors.sum(0)) <= 1e-9 * mass
    # outward orientation
    assert np.sum(d.centers * d.area_vectors) > 0


def test_triangle_index_validation():
    with pytest.raises(DataError):
        TriMesh([[0, 0, 0]], [[0, 1, 2]])
    with pytest.raises(DataError):
        TriMesh(np.zeros((3, 2)), [[0, 1, 2]])


coords = hnp.arrays(np.float64, (3, 3), elements=st.floats(-100, 100, allow_nan=False))


@given(coords)
@settings(max_examples=60, deadline=None)
def test_descriptor_properties(P):
    m = TriMesh(P, [[0, 1, 2]])
    d = triangle_descriptors(m)
    np.testing.assert_allclose(d.centers[0], P.mean(0), atol=1e-12)
    tau = d.area_vectors[0]
    # perpendicular to both edges
    scale = 1 + np.abs(P).max() ** 2
    assert abs(tau @ (P[1] - P[0])) <= 1e-9 * scale * (1 + np.abs(P).max())
    assert abs(tau @ (P[2] - P[0])) <= 1e-9 * scale * (1 + np.abs(P).max())
    # cyclic relabeling leaves tau unchanged
    d2 = triangle_descriptors(TriMesh(P, [[1, 2, 0]]))
    np.testing.assert_allclose(d2.area_vectors[0], tau, atol=1e-9 * scale)
