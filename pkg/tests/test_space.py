import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from heatlab.mesh import icosphere, torus_grid
from heatlab.space import (
    ball_measures,
    ball_pairs,
    ball_query,
    build_from_mesh,
    build_model_space,
    group_eigenvalues,
    load_space,
    save_space,
    solve_spectrum,
)


@pytest.fixture(scope="module")
def circle():
    return build_model_space("circle", P=256, L=41)


@pytest.fixture(scope="module")
def interval():
    return build_model_space("interval", P=257, L=40)


@pytest.fixture(scope="module")
def sphere_mesh():
    return build_from_mesh(icosphere(4), L=16)


def gram_residual(space):
    phi = space.eigenfunctions
    gram = phi.T @ (space.mass[:, None] * phi)
    return np.abs(gram - np.eye(len(gram))).max()


def test_circle_spectrum(circle):
    expected = ([0] + [k * k for k in range(1, 22) for _ in range(2)])[:42]
    assert_allclose(circle.eigenvalues, expected, atol=0)
    assert gram_residual(circle) < 1e-10
    assert circle.intrinsic_dim == 1
    assert_allclose(circle.total_measure, 2 * np.pi, rtol=1e-14)


def test_circle_cutoff_inside_cluster_is_flagged():
    space = build_model_space("circle", P=64, L=3)
    assert not space.last_cluster_complete
    assert space.complete_cutoff() == 2
    assert build_model_space("circle", P=64, L=4).complete_cutoff() == 4


def test_interval_eigenfunction_values(interval):
    x = interval.coords
    assert x[0, 0] == 0.0 and math.isclose(x[-1, 0], np.pi)
    assert_allclose(interval.eigenfunctions[0, 3], math.sqrt(2 / np.pi), rtol=1e-14)
    assert abs(interval.eigengradients[0, 3, 0]) < 1e-14
    assert_allclose(interval.eigenfunctions[:, 0], 1 / math.sqrt(np.pi), rtol=1e-14)
    assert_allclose(interval.eigenvalues, np.arange(41) ** 2)
    assert gram_residual(interval) < 1e-10


def test_round_sphere_spectrum():
    space = build_model_space("round_sphere", {"max_degree": 8}, P=2 * 16 * 16, L=15)
    expected = [l * (l + 1) for l in range(4) for _ in range(2 * l + 1)]
    assert_allclose(space.eigenvalues, expected, atol=1e-12)
    assert gram_residual(space) < 1e-10


def test_flat_torus_product_basis():
    a, b = 2 * np.pi, np.pi
    space = build_model_space("flat_torus", {"sides": [a, b]}, P=32 * 32, L=12)
    # eigenvalues (2 pi j / a)^2 + (2 pi k / b)^2 with multiplicities
    vals = sorted(j * j + 4 * k * k for j in range(-6, 7) for k in range(-6, 7))
    assert_allclose(space.eigenvalues, vals[:13])
    assert gram_residual(space) < 1e-10


@pytest.mark.parametrize("kind", ["spiral", "klein_bottle"])
def test_unsupported_kind(kind):
    with pytest.raises(ValueError, match="unsupported"):
        build_model_space(kind)


def test_invalid_sizes():
    with pytest.raises(ValueError):
        build_model_space("circle", P=8, L=4)
    with pytest.raises(ValueError):
        build_model_space("circle", P=64, L=0)
    with pytest.raises(ValueError):
        build_model_space("circle", P=32, L=200)
    with pytest.raises(ValueError):
        build_model_space("flat_torus", {"sides": [1.0, -1.0]}, P=256, L=4)


def test_gradients_match_finite_differences():
    space = build_model_space("circle", P=2048, L=10)
    h = space.spacing
    phi = space.eigenfunctions
    fd = (np.roll(phi, -1, axis=0) - np.roll(phi, 1, axis=0)) / (2 * h)
    err = np.abs(fd - space.eigengradients[:, :, 0]).max()
    # second-order central difference: error ~ k^3 h^2 / 6
    assert err < 25 * 5**3 * h**2 / 6 + 1e-12


def test_weyl_growth():
    space = build_model_space("flat_torus", P=48 * 48, L=200)
    i = np.arange(1, 201)
    ratio = space.eigenvalues[1:] / i
    assert ratio.min() > 0.05 and ratio.max() < 2.0


def test_heat_kernel_tail_bound():
    space = build_model_space("circle", P=512, L=80)
    t = 0.05
    phi = space.eigenfunctions
    lam = space.eigenvalues
    w = np.exp(-lam * t)
    low = (phi[:, :41] * w[:41]) @ phi[:5, :41].T
    high = (phi * w) @ phi[:5].T
    tail = np.sum(w[41:]) / np.pi
    assert np.abs(high - low).max() <= tail


def test_grouping_tolerance():
    groups = group_eigenvalues([0.0, 1.0, 1.0 + 5e-7, 4.0, 4.0 + 1e-4])
    assert [len(g) for g in groups] == [1, 2, 1, 1]


def test_solve_spectrum_diagonal():
    lam, vec = solve_spectrum(np.diag([0.0, 1.0, 4.0]), np.ones(3), 3)
    assert_allclose(lam, [0, 1, 4], atol=1e-14)
    assert_allclose(np.abs(vec), np.eye(3), atol=1e-14)


def test_solve_spectrum_path_graph():
    n, length = 101, 1.0
    h = length / (n - 1)
    S = (np.diag(np.r_[1, 2 * np.ones(n - 2), 1]) - np.eye(n, k=1) - np.eye(n, k=-1)) / h
    m = np.full(n, h)
    m[[0, -1]] = h / 2
    lam, _ = solve_spectrum(S, m, 6)
    k = np.arange(6)
    assert_allclose(lam[1:], (k[1:] * np.pi / length) ** 2, rtol=0.01)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_solve_spectrum_reconstructs_spd(seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((20, 20))
    S = A @ A.T + 0.1 * np.eye(20)
    lam, vec = solve_spectrum(S, np.ones(20), 20)
    assert np.linalg.norm(vec @ np.diag(lam) @ vec.T - S) < 1e-8 * max(1.0, np.linalg.norm(S))


def test_solve_spectrum_rejects_asymmetric():
    S = np.array([[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(ValueError, match="symmetric"):
        solve_spectrum(S, np.ones(2), 2)


def test_icosphere_spectrum(sphere_mesh):
    lam = sphere_mesh.eigenvalues
    assert sphere_mesh.n_samples == 2562
    assert abs(lam[0]) < 1e-8
    assert_allclose(lam[1:4], 2, rtol=0.02)
    assert_allclose(lam[4:9], 6, rtol=0.05)
    phi1 = sphere_mesh.eigenfunctions[:, 1]
    assert abs(np.sum(sphere_mesh.mass * phi1**2) - 1) < 1e-8


def test_icosphere_refinement_converges():
    errs = []
    for level in (2, 3, 4):
        lam = build_from_mesh(icosphere(level), L=8).eigenvalues
        exact = np.array([0, 2, 2, 2, 6, 6, 6, 6, 6])
        errs.append(np.abs(lam - exact)[1:].max())
    assert errs[0] > errs[1] > errs[2]


def test_torus_mesh_first_eigenvalue():
    space = build_from_mesh(torus_grid(32), L=4)
    assert_allclose(space.eigenvalues[1], 1.0, rtol=0.02)


def test_mesh_cutoff_too_large():
    mesh = icosphere(1)
    with pytest.raises(ValueError):
        build_from_mesh(mesh, L=mesh.n_vertices)


def test_mesh_distances_are_a_metric(sphere_mesh):
    rng = np.random.default_rng(3)
    rows = rng.choice(sphere_mesh.n_samples, 30, replace=False)
    d = sphere_mesh.distance_rows(rows)[:, rows]
    assert_allclose(d, d.T, atol=1e-12)
    assert_allclose(np.diag(d), 0)
    assert np.all(d[:, :, None] <= d[:, None, :] + d.T[None, :, :] + 1e-12)
    # edge paths are chains of chords: never shorter than the straight chord
    # and only a bounded factor longer than the great-circle arc
    pts = sphere_mesh.embedded_points()[rows]
    geo = np.arccos(np.clip(pts @ pts.T, -1, 1))
    chord = 2 * np.sin(geo / 2)
    np.fill_diagonal(chord, 0.0)
    assert np.all(d >= chord - 1e-9) and np.all(d <= 1.3 * geo + 1e-9)


def test_model_triangle_inequality(circle):
    d = circle.distance_rows(np.arange(0, 256, 7))[:, ::7]
    assert np.all(d[:, :, None] <= d[:, None, :] + d.T[None, :, :] + 1e-12)


def test_ball_query_whole_circle(circle):
    ball = ball_query(circle, 0, np.pi + 0.1)
    assert len(ball.ids) == circle.n_samples
    assert_allclose(ball.measure, 2 * np.pi, rtol=1e-14)


def test_ball_query_small_arc(circle):
    ball = ball_query(circle, 10, 0.1)
    assert 10 in ball.ids
    assert abs(ball.measure - 0.2) <= 2 * (2 * np.pi / 256)
    assert np.all(circle.distance(10, ball.ids) < 0.1)


def test_ball_query_interval_boundary(interval):
    ball = ball_query(interval, 0, 0.5)
    assert abs(ball.measure - 0.5) <= interval.spacing


def test_ball_query_rejects_nonpositive_radius(circle):
    with pytest.raises(ValueError):
        ball_query(circle, 0, 0.0)


@pytest.mark.parametrize(
    "kind, params, P",
    [
        ("circle", {}, 200),
        ("interval", {}, 101),
        ("flat_torus", {"sides": [2.0, 3.0]}, 24 * 24),
        ("round_sphere", {"max_degree": 4}, 2 * 10 * 10),
    ],
)
def test_ball_pairs_match_dense_distances(kind, params, P):
    space = build_model_space(kind, params, P=P, L=4)
    r = 0.37 * space.diameter_bound
    rows, cols, dist = ball_pairs(space, r)
    dense = space.distance_rows(np.arange(space.n_samples))
    expected = np.argwhere(dense < r)
    got = np.stack([rows, cols], axis=1)
    assert np.array_equal(got[np.lexsort((cols, rows))], expected)
    assert_allclose(dist, dense[rows, cols], rtol=0, atol=0)
    assert_allclose(ball_measures(space, r), (dense < r) @ space.mass)


def test_ball_pairs_mesh(sphere_mesh):
    rows, cols, dist = ball_pairs(sphere_mesh, 0.2)
    ref = sphere_mesh.distance_rows(np.arange(5))
    for p in range(5):
        assert_allclose(np.sort(cols[rows == p]), np.flatnonzero(ref[p] < 0.2))


@pytest.mark.parametrize("kind", ["circle", "interval", "flat_torus", "round_sphere"])
def test_json_round_trip(tmp_path, kind):
    P = {"flat_torus": 16 * 16, "round_sphere": 2 * 8 * 8}.get(kind, 64)
    params = {"max_degree": 3} if kind == "round_sphere" else {}
    space = build_model_space(kind, params, P=P, L=8)
    path = tmp_path / "space.json"
    save_space(space, path)
    back = load_space(path)
    assert_allclose(back.eigenvalues, space.eigenvalues, rtol=0, atol=0)
    assert_allclose(back.eigenfunctions, space.eigenfunctions, rtol=0, atol=0)
    assert_allclose(back.eigengradients, space.eigengradients, rtol=0, atol=0)
    assert_allclose(back.distance_rows([0, 3]), space.distance_rows([0, 3]))


def test_json_round_trip_mesh(tmp_path):
    space = build_from_mesh(icosphere(2), L=8)
    save_space(space, tmp_path / "mesh.json")
    back = load_space(tmp_path / "mesh.json")
    assert back.is_mesh
    assert_allclose(back.eigenvalues, space.eigenvalues, rtol=0, atol=0)
    assert_allclose(back.distance_rows([1]), space.distance_rows([1]))


def test_json_schema_version_required(tmp_path):
    import json

    space = build_model_space("circle", P=32, L=3)
    path = tmp_path / "s.json"
    save_space(space, path)
    doc = json.loads(path.read_text())
    del doc["schema_version"]
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="schema_version"):
        load_space(path)
