import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from heatlab.embed import (
    DimensionConstants,
    SymTensorField,
    TruncationError,
    bilipschitz_report,
    choose_truncation,
    distortion_field,
    distortion_norm,
    distortion_report,
    embedding_coords,
    heat_kernel,
    pullback_metric,
    smoothable_set,
    truncation_tail,
)
from heatlab.space import build_model_space


def series_g(t, kmax=400):
    """(1/pi) sum_k k^2 exp(-2 k^2 t), the circle pull-back metric."""
    return math.fsum(k * k * math.exp(-2 * k * k * t) for k in range(1, kmax)) / math.pi


@pytest.fixture(scope="module")
def circle():
    return build_model_space("circle", P=1024, L=160)


@pytest.fixture(scope="module")
def interval():
    return build_model_space("interval", P=1025, L=160)


def test_dimension_constants():
    c1 = DimensionConstants(1)
    assert_allclose(c1.c, 4 * math.sqrt(8 * math.pi))
    assert_allclose(c1.omega, 2.0)
    assert_allclose(DimensionConstants(2).omega, math.pi)
    assert_allclose(DimensionConstants(3).omega, 4 * math.pi / 3)
    assert_allclose(c1.scale(0.02), c1.c * 0.02**1.5)
    assert_allclose(math.sqrt(c1.c), 4.47799, rtol=1e-4)
    with pytest.raises(ValueError):
        DimensionConstants(0)


def test_heat_kernel_long_time(circle):
    vals = heat_kernel(circle, np.arange(0, 1024, 97)[:, None], np.arange(0, 1024, 89)[None, :], 50.0)
    assert_allclose(vals, 1 / (2 * math.pi), atol=1e-10)


def test_heat_kernel_diagonal_series(circle):
    oracle = 1 / (2 * math.pi) + math.fsum(math.exp(-0.5 * k * k) for k in range(1, 200)) / math.pi
    assert_allclose(heat_kernel(circle, 5, 5, 0.5), oracle, atol=1e-12)


@pytest.mark.parametrize("kind", ["circle", "interval", "flat_torus", "round_sphere"])
def test_heat_kernel_stochastic_completeness(kind):
    P = {"flat_torus": 32 * 32, "round_sphere": 2 * 16 * 16}.get(kind, 256)
    params = {"max_degree": 12} if kind == "round_sphere" else {}
    space = build_model_space(kind, params, P=P, L=40)
    row = heat_kernel(space, np.arange(7)[:, None], np.arange(space.n_samples)[None, :], 0.05)
    assert_allclose(row @ space.mass, 1.0, atol=1e-6)
    assert_allclose(heat_kernel(space, 3, 11, 0.05), heat_kernel(space, 11, 3, 0.05), rtol=1e-14)


def test_heat_kernel_rejects_nonpositive_t(circle):
    with pytest.raises(ValueError, match="positive"):
        heat_kernel(circle, 0, 0, 0.0)


def test_embedding_coordinates_closed_form(circle):
    t = 0.02
    x = embedding_coords(circle, 0, t, 2)
    amp = math.sqrt(DimensionConstants(1).c) * t**0.75 * math.exp(-t) / math.sqrt(math.pi)
    assert_allclose(x, [amp, 0.0], atol=1e-15)
    assert_allclose(t**0.75, 0.053183, rtol=1e-5)


def test_embedding_underflow_gives_zeros(circle):
    x = embedding_coords(circle, np.arange(10), 40.0, 160)
    assert np.all(np.isfinite(x))
    assert np.all(x[:, -20:] == 0.0)


def test_embedding_rotation_invariance(circle):
    rng = np.random.default_rng(7)
    coords = embedding_coords(circle, np.arange(circle.n_samples), 0.05, 40)
    p, q = rng.integers(1024, size=(2, 100))
    shift = rng.integers(1024, size=100)
    a = np.linalg.norm(coords[p] - coords[q], axis=1)
    b = np.linalg.norm(coords[(p + shift) % 1024] - coords[(q + shift) % 1024], axis=1)
    assert_allclose(a, b, atol=1e-10)


def test_embedding_rejects_large_l(circle):
    with pytest.raises(ValueError):
        embedding_coords(circle, 0, 0.1, 500)


def test_choose_truncation_circle():
    space = build_model_space("circle", P=256, L=41)
    trunc = choose_truncation(space, 0.05, 1e-6)
    assert trunc.l <= 41 and trunc.tail < 1e-6
    # direct summation oracle: index i > 0 carries mode k = (i + 1) // 2 with sup|grad|^2 = k^2 / pi
    scale = DimensionConstants(1).scale(0.05)
    direct = scale * math.fsum(
        ((i + 1) // 2) ** 2 * math.exp(-0.1 * ((i + 1) // 2) ** 2) / math.pi for i in range(trunc.l + 1, 800)
    )
    assert abs(trunc.tail - direct) < 0.1 * direct
    big = build_model_space("circle", P=512, L=83)
    assert abs(truncation_tail(big, 0.05, trunc.l) - trunc.tail) < 0.1 * trunc.tail


def test_choose_truncation_huge_delta():
    space = build_model_space("circle", P=256, L=41)
    assert choose_truncation(space, 0.05, 1e9).l == 1


def test_choose_truncation_monotone_in_t():
    space = build_model_space("circle", P=512, L=121)
    ls = [choose_truncation(space, t, 1e-8).l for t in (0.01, 0.02, 0.04, 0.08)]
    assert ls == sorted(ls, reverse=True)


def test_choose_truncation_unreachable():
    space = build_model_space("circle", P=64, L=9)
    with pytest.raises(TruncationError, match="increase L"):
        choose_truncation(space, 0.001, 1e-8)


def test_pullback_metric_series(circle):
    t = 0.02
    g = pullback_metric(circle, t, 80).values[:, 0, 0]
    assert_allclose(g, series_g(t), rtol=1e-12)
    assert_allclose(series_g(t), 17.6, rtol=0.01)
    assert abs(DimensionConstants(1).scale(t) * g.max() - 1) < 0.01


def test_pullback_metric_vanishes_at_interval_endpoint(interval):
    g = pullback_metric(interval, 0.03, 100).values
    assert g[0, 0, 0] == 0.0 and g[-1, 0, 0] == pytest.approx(0.0, abs=1e-20)


def test_pullback_metric_is_psd():
    space = build_model_space("round_sphere", {"max_degree": 10}, P=2 * 20 * 20, L=48)
    g = pullback_metric(space, 0.05).values
    assert np.linalg.eigvalsh(g).min() > -1e-12


def test_pullback_metric_basis_invariant():
    space = build_model_space("flat_torus", P=24 * 24, L=12)
    rng = np.random.default_rng(1)
    phi = space.eigenfunctions.copy()
    grad = space.eigengradients.copy()
    for c in space.clusters:
        q, _ = np.linalg.qr(rng.standard_normal((len(c), len(c))))
        phi[:, c] = phi[:, c] @ q
        grad[:, c] = np.einsum("pim,ij->pjm", grad[:, c], q)
    from dataclasses import replace

    mixed = replace(space, eigenfunctions=phi, eigengradients=grad)
    assert_allclose(pullback_metric(mixed, 0.1).values, pullback_metric(space, 0.1).values, atol=1e-12)


def test_distortion_circle_small(circle):
    fld = distortion_field(circle, 0.02, 80, "A")
    assert fld.values.max() < 0.02


def test_distortion_interval_endpoint(interval):
    fld = distortion_field(interval, 0.02, 140, "A")
    assert fld.values[0] == 1.0


def test_distortion_normalizations_agree(circle):
    a = distortion_field(circle, 0.02, 80, "A").values
    b = distortion_field(circle, 0.02, 80, "B")
    assert not b.under_resolved
    assert np.abs(a - b.values).max() < 0.03


def test_distortion_b_under_resolved():
    space = build_model_space("circle", P=64, L=31)
    with pytest.warns(UserWarning, match="under-resolved"):
        fld = distortion_field(space, 1e-4, None, "B")
    assert fld.under_resolved


def test_distortion_unknown_normalization(circle):
    with pytest.raises(ValueError, match="normalization"):
        distortion_field(circle, 0.02, 10, "C")


def test_distortion_norm_constant_field(circle):
    ones = np.ones(circle.n_samples)
    assert_allclose(distortion_norm(ones, 1, circle), 2 * math.pi)
    assert distortion_norm(ones, math.inf, circle) == 1.0
    assert_allclose(distortion_norm(ones, 2, circle, normalized=True), 1.0)


def test_distortion_schedules(circle, interval):
    ts = (0.04, 0.02, 0.01)
    il1 = [distortion_norm(distortion_field(interval, t, 160), 1, interval) for t in ts]
    ilinf = [distortion_norm(distortion_field(interval, t, 160), math.inf, interval) for t in ts]
    cl1 = [distortion_norm(distortion_field(circle, t, 160), 1, circle) for t in ts]
    clinf = [distortion_norm(distortion_field(circle, t, 160), math.inf, circle) for t in ts]
    assert il1[0] > il1[1] > il1[2]
    assert min(ilinf) >= 0.99
    # on the circle the normalized metric is exact up to exp(-pi^2 / 2t) corrections
    assert max(clinf) < 0.05 and max(cl1) < 0.05


def test_distortion_report_norms(interval):
    rep = distortion_report(interval, 0.02, 140, exponents=(1, 2))
    assert set(rep.norms) == {"L1", "L2", "Linf"}
    assert rep.norms["Linf"] == 1.0
    assert rep.to_dict()["distortion"] is None


def test_smoothable_circle(circle):
    s = smoothable_set(circle, 0.05, 0.01, 1.0, l=160)
    assert s.fraction == 1.0


def test_smoothable_interval_excludes_endpoints(interval):
    s = smoothable_set(interval, 0.05, 0.01, 0.5, l=160)
    assert s.fraction < 1.0
    assert not s.mask[0] and not s.mask[-1]
    x = interval.coords[:, 0]
    assert s.mask[(x > 1.0) & (x < np.pi - 1.0)].all()


def test_smoothable_large_eps():
    space = build_model_space("interval", P=257, L=40)
    assert smoothable_set(space, 10.0, 0.05, 0.5).fraction == 1.0


def test_smoothable_skips_fine_radii():
    space = build_model_space("circle", P=64, L=31)
    with pytest.warns(UserWarning, match="skipped"):
        s = smoothable_set(space, 0.5, 0.05, 1.0, radius_grid=[0.01, 0.5, 1.0])
    assert s.skipped == [0.01]


def test_bilipschitz_circle(circle):
    rep = bilipschitz_report(circle, 0.01, choose_truncation(circle, 0.01, 1e-8).l, 0.1, n_pairs=2000, seed=0)
    assert 0.95 <= rep.local_ratio_min <= rep.local_ratio_max <= 1.05
    assert rep.injectivity_gap > 0


def test_bilipschitz_interval_witness(interval):
    rep = bilipschitz_report(interval, 0.01, 160, 0.1, n_pairs=2000, seed=0)
    assert rep.local_ratio_min < 0.5
    w = rep.local_witness
    x = interval.coords[[w["p"], w["q"]], 0]
    assert min(x.min(), np.pi - x.max()) < 0.05
    assert rep.injectivity_gap > 0


def test_bilipschitz_seeded(circle):
    a = bilipschitz_report(circle, 0.02, 80, 0.2, n_pairs=200, seed=4)
    b = bilipschitz_report(circle, 0.02, 80, 0.2, n_pairs=200, seed=4)
    assert a.local_witness == b.local_witness and a.local_ratio_max == b.local_ratio_max


sym_matrices = st.integers(1, 3).flatmap(
    lambda m: st.lists(
        st.floats(-10, 10).map(lambda x: 0.0 if abs(x) < 1e-100 else x), min_size=m * m, max_size=m * m
    ).map(
        lambda xs: np.reshape(xs, (m, m))
    )
)


@settings(max_examples=200, deadline=None)
@given(sym_matrices)
def test_tensor_norm_chain(A):
    T = SymTensorField(A[None])
    m = T.dim
    hs, b = T.hs_norm()[0], T.bound_norm()[0]
    assert b <= hs * (1 + 1e-12) + 1e-300
    assert hs <= math.sqrt(m) * b * (1 + 1e-12) + 1e-300


def test_sym_tensor_field_trace_and_scale():
    T = SymTensorField(np.array([[[1.0, 2.0], [0.0, 3.0]]]))
    assert_allclose(T.values[0], [[1, 1], [1, 3]])
    assert_allclose(T.trace(), [4.0])
    assert_allclose(T.scaled(np.array([2.0])).values[0], [[2, 2], [2, 6]])
