"""Korevaar-Schoen energies at scale r and their comparison with heat-kernel energies."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import maps
from ._io import write_csv
from .embed import DimensionConstants
from .maps import PointMap, check_schedule, extrapolate_to_zero
from .space import ball_measures, ball_sums

RATIO_TOL = 0.05


class ResolutionError(ValueError):
    """The requested scale is too small for the sample spacing."""


def _target_distances(f: PointMap, rows, cols):
    tgt = f.target
    if f.kind == "analytic":
        return tgt.geometry.point_distance(f.target_coords[rows], f.target_coords[cols])
    a, b = f.assignment[rows], f.assignment[cols]
    if tgt.is_mesh:
        return tgt.geometry.point_distance(a, b)
    return tgt.geometry.point_distance(tgt.coords[a], tgt.coords[b])


def ks_density(f: PointMap, r: float) -> np.ndarray:
    """Squared Korevaar-Schoen density ks_r(f)(x_p)^2 per source sample.

    ``(1 / mu(B_r(x_p))) sum_{d(x_p, x_q) < r} mu_q d_Y(f(x_p), f(x_q))^2 / r^2``
    with the target's geodesic distance.
    """
    src = f.source
    if r < 2 * src.spacing:
        raise ResolutionError(f"radius r={r:g} is below twice the sample spacing {src.spacing:.3g}")
    num = ball_sums(src, r, pair_values=lambda p, q, d: np.asarray(_target_distances(f, p, q), float) ** 2)
    return num / ball_measures(src, r) / r**2


def ks_energy(f: PointMap, r: float) -> float:
    """E^KS_r(f) = sum_p mu_p ks_r(f)(x_p)^2."""
    return float(f.source.mass @ ks_density(f, r))


@dataclass
class KSReport:
    radii: np.ndarray
    densities: list
    totals: np.ndarray
    ratios: np.ndarray
    ks_smallest: float
    ks_extrapolated: float
    energy: maps.NormalizedEnergy
    ratio: float
    expected: float
    l1_gap: float
    tolerance: float = RATIO_TOL

    @property
    def passed(self) -> bool:
        return abs(self.ratio / self.expected - 1.0) <= self.tolerance

    def to_dict(self) -> dict:
        return {
            "radii": self.radii.tolist(),
            "ks_totals": self.totals.tolist(),
            "ratios": self.ratios.tolist(),
            "ks_smallest_r": self.ks_smallest,
            "ks_extrapolated": self.ks_extrapolated,
            "energy": self.energy.to_dict(),
            "ratio": self.ratio,
            "expected": self.expected,
            "l1_gap": self.l1_gap,
            "tolerance": self.tolerance,
            "verdict": "PASS" if self.passed else "FAIL",
        }

    def write_csv(self, path):
        return write_csv(path, ["r", "ks_energy", "ratio"], zip(self.radii, self.totals, self.ratios))


def ks_compare(
    f: PointMap, t_schedule, r_schedule, delta: float | None = 1e-8, tolerance: float = RATIO_TOL
) -> KSReport:
    """Compare the extrapolated A-normalized energy with the extrapolated KS energy.

    The expected ratio is (n + 2) / 2 for the source dimension n.  The KS
    limit is a linear-in-r fit over the decreasing radius schedule evaluated
    at r = 0.  ``l1_gap`` is the relative L^1 distance between
    (n + 2) ks_r(f)^2 at the smallest r and the A-normalized t-energy density
    at the smallest t.
    """
    radii = check_schedule(r_schedule, "r_schedule")
    ts = check_schedule(t_schedule, "t_schedule")
    n = f.source.intrinsic_dim
    dens = [ks_density(f, r) for r in radii]
    totals = np.array([float(f.source.mass @ d) for d in dens])
    ks_ex = extrapolate_to_zero(radii, totals, 1)
    energy = maps.normalized_energy(f, ts, delta)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = energy.extrapolated_A / totals
        ratio = energy.extrapolated_A / ks_ex if ks_ex != 0 else math.nan
    t_min = float(ts[-1])
    a_density = DimensionConstants(f.target.intrinsic_dim).scale(t_min) * energy.densities[-1]
    mu = f.source.mass
    denom = float(mu @ np.abs(a_density))
    gap = float(mu @ np.abs((n + 2) * dens[-1] - a_density))
    l1 = gap / denom if denom > 0 else gap
    return KSReport(radii, dens, totals, np.atleast_1d(ratios), float(totals[-1]), ks_ex, energy, float(ratio), (n + 2) / 2, l1, tolerance)
