import numpy as np
import pytest
from numpy.testing import assert_allclose

from heatlab.mesh import Mesh, MeshError, icosphere, load_mesh, relax_on_sphere, torus_grid, write_obj, write_off


def test_icosphere_counts_and_radius():
    for level, n in [(0, 12), (1, 42), (3, 642)]:
        m = icosphere(level)
        assert m.n_vertices == n
        assert len(m.triangles) == 20 * 4**level
        assert_allclose(np.linalg.norm(m.vertices, axis=1), 1.0)


def test_relaxed_icosphere_is_fixed_point():
    m = icosphere(2, relaxed=True)
    assert_allclose(np.linalg.norm(m.vertices, axis=1), 1.0)
    again = relax_on_sphere(m)
    assert np.abs(again.vertices - m.vertices).max() < 1e-10
    assert np.array_equal(m.triangles, icosphere(2).triangles)


def test_mass_sums_to_area():
    m = icosphere(3)
    assert_allclose(m.vertex_mass.sum(), m.face_areas.sum(), rtol=1e-12)
    assert np.all(m.vertex_mass > 0)
    t = torus_grid(8, 6, a=2.0, b=3.0)
    assert_allclose(t.vertex_mass, 6.0 / 48)


def test_stiffness_annihilates_constants():
    for m in (icosphere(2), torus_grid(10)):
        S = m.stiffness
        assert_allclose(S @ np.ones(m.n_vertices), 0, atol=1e-12)
        assert abs(S - S.T).max() < 1e-14


def test_dirichlet_density_integrates_to_quadratic_form():
    m = icosphere(3)
    u = np.random.default_rng(0).standard_normal((m.n_vertices, 2))
    dens = m.dirichlet_density(u)
    assert_allclose(m.vertex_mass @ dens, sum(x @ (m.stiffness @ x) for x in u.T), rtol=1e-10)


def test_vertex_gradients_of_linear_function_on_torus():
    m = torus_grid(16)
    x = m.vertices[:, 1]
    u = np.sin(x)
    g = m.vertex_gradients(u[:, None])[:, 0]
    frames = m.vertex_frames
    grad3 = np.einsum("pm,pmd->pd", g, frames)
    assert_allclose(grad3[:, 1], np.cos(x), atol=0.05)
    assert_allclose(grad3[:, 0], 0, atol=1e-10)


def test_degenerate_triangle_rejected():
    v = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]], float)
    with pytest.raises(MeshError, match="degenerate"):
        Mesh(v, np.array([[0, 1, 2], [0, 1, 3]]))


def test_disconnected_mesh_rejected():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 0], [6, 5, 0], [5, 6, 0]], float)
    with pytest.raises(MeshError, match="connected"):
        Mesh(v, np.array([[0, 1, 2], [3, 4, 5]]))


def test_bad_indices_rejected():
    with pytest.raises(MeshError, match="range"):
        Mesh(np.eye(3), np.array([[0, 1, 3]]))


@pytest.mark.parametrize("writer, suffix", [(write_off, ".off"), (write_obj, ".obj")])
def test_mesh_file_round_trip(tmp_path, writer, suffix):
    m = icosphere(1)
    path = tmp_path / f"sphere{suffix}"
    writer(m, path)
    back = load_mesh(path)
    assert np.array_equal(back.triangles, m.triangles)
    assert_allclose(back.vertices, m.vertices, rtol=0, atol=0)


def test_non_triangle_faces_rejected(tmp_path):
    path = tmp_path / "quad.off"
    path.write_text("OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n")
    with pytest.raises(MeshError, match="triangular"):
        load_mesh(path)
    obj = tmp_path / "quad.obj"
    obj.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    with pytest.raises(MeshError, match="triangular"):
        load_mesh(obj)


def test_unknown_format(tmp_path):
    with pytest.raises(MeshError, match="unsupported"):
        load_mesh(tmp_path / "mesh.stl")


def test_geodesics_on_torus_grid():
    m = torus_grid(16)
    d = m.geodesic_distances(0)
    h = 2 * np.pi / 16
    # vertex (i, j) has index 16 i + j; edges run along the axes and the (1, 1) diagonal
    assert_allclose(d[16 * 8], 8 * h, rtol=1e-12)
    assert_allclose(d[16 * 4 + 4], 4 * np.sqrt(2) * h, rtol=1e-12)
    assert_allclose(d[16 * 4 + 12], 8 * h, rtol=1e-12)
    assert_allclose(np.sort(d)[1], h)
