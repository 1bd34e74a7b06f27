import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from heatlab.ks import ResolutionError, ks_compare, ks_density, ks_energy
from heatlab.maps import analytic_map, circle_power_map, constant_map, identity_map, vertex_map
from heatlab.space import build_model_space


@pytest.fixture(scope="module")
def circle():
    return build_model_space("circle", P=2048, L=4)


@pytest.fixture(scope="module")
def target():
    return build_model_space("circle", P=1024, L=241)


def half_integer_radii(space, multiples):
    return (np.asarray(multiples) + 0.5) * space.spacing


def test_circle_identity_density(circle):
    dens = ks_density(identity_map(circle), 0.2)
    assert_allclose(3 * dens, 1.0, rtol=0.02)
    assert np.ptp(dens) < 1e-12


def test_torus_identity_density():
    torus = build_model_space("flat_torus", P=96 * 96, L=4)
    dens = ks_density(identity_map(torus), 0.4)
    assert_allclose(4 * dens, 2.0, rtol=0.05)


def test_constant_map_density(circle):
    assert np.all(ks_density(constant_map(circle), 0.1) == 0)
    assert ks_energy(constant_map(circle), 0.1) == 0


def test_ks_energy_values(circle):
    assert_allclose(ks_energy(identity_map(circle), 0.1), 2 * math.pi / 3, rtol=0.02)
    assert_allclose(ks_energy(circle_power_map(circle, 2), 0.05), 8 * math.pi / 3, rtol=0.03)


def test_under_resolved_radius(circle):
    with pytest.raises(ResolutionError, match="spacing"):
        ks_density(identity_map(circle), 1.5 * circle.spacing)


def test_vertex_map_density_matches_analytic():
    src = build_model_space("circle", P=512, L=4)
    tgt = build_model_space("circle", P=512, L=4)
    a = ks_density(analytic_map("identity", src, tgt), 0.3)
    v = ks_density(vertex_map(src, tgt, np.arange(512)), 0.3)
    assert_allclose(v, a, rtol=1e-12)


@pytest.mark.parametrize("k", [1, 3])
def test_circle_ratio(circle, target, k):
    rep = ks_compare(circle_power_map(circle, k, target), [0.04, 0.02, 0.01], half_integer_radii(circle, [64, 32, 16]))
    assert rep.expected == 1.5
    assert abs(rep.ratio / 1.5 - 1) < 0.05 and rep.passed
    assert rep.l1_gap < 0.05
    assert rep.to_dict()["verdict"] == "PASS"


def test_ratio_failure_is_reported(circle, target):
    f = circle_power_map(circle, 1, target)
    rep = ks_compare(f, [0.04, 0.02, 0.01], half_integer_radii(circle, [64, 32, 16]), tolerance=1e-6)
    assert not rep.passed and rep.to_dict()["verdict"] == "FAIL"


def test_schedule_validation(circle, target):
    f = circle_power_map(circle, 1, target)
    with pytest.raises(ValueError, match="r_schedule"):
        ks_compare(f, [0.04, 0.02], [0.1, 0.2])
    with pytest.raises(ValueError, match="t_schedule"):
        ks_compare(f, [-0.04], [0.2, 0.1])


def test_report_csv(tmp_path, circle, target):
    rep = ks_compare(circle_power_map(circle, 1, target), [0.04, 0.02], half_integer_radii(circle, [64, 32]))
    path = rep.write_csv(tmp_path / "ks.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "r,ks_energy,ratio" and len(lines) == 3
