"""Maps into round spheres: energy, tension, harmonic-map flow and eigenmaps.

The discrete Laplacian follows the analyst's sign, ``Delta phi + lam phi = 0``
for eigenpairs: on meshes ``Delta_h = -M^{-1} S`` with the cotangent
stiffness ``S`` and lumped mass ``M``; on model spaces it is the spectral
Laplacian of the grid-complete eigenbasis.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import diags
from scipy.sparse.linalg import eigsh

from . import maps
from ._io import write_csv
from .space import SpectralSpace, build_model_space

logger = logging.getLogger(__name__)


class EigenmapError(ValueError):
    """The requested eigenmap cannot be formed."""

    def __init__(self, message, deviation=None):
        super().__init__(message)
        self.deviation = deviation


@dataclass(frozen=True, eq=False)
class SphereMap:
    """Samples of ``source`` mapped to the unit sphere S^k in R^{k+1}.

    Rows are renormalized on construction.
    """

    source: SpectralSpace
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != self.source.n_samples or v.shape[1] < 2:
            raise ValueError(f"values must have shape ({self.source.n_samples}, k+1) with k >= 1")
        norms = np.linalg.norm(v, axis=1)
        if np.any(norms == 0) or not np.all(np.isfinite(norms)):
            raise ValueError("sphere map rows must be finite and nonzero")
        object.__setattr__(self, "values", v / norms[:, None])

    @property
    def k(self) -> int:
        return self.values.shape[1] - 1

    def to_dict(self) -> dict:
        return {"source_id": self.source.name, "k": self.k, "values": self.values.tolist()}


def circle_power(source: SpectralSpace, k: int = 1) -> SphereMap:
    """theta -> (cos k theta, sin k theta) on a circle model space."""
    th = source.coords[:, 0]
    return SphereMap(source, np.column_stack([np.cos(k * th), np.sin(k * th)]))


def coordinate_map(source: SpectralSpace) -> SphereMap:
    """Identity of a unit-sphere space, through its embedded points."""
    return SphereMap(source, source.embedded_points())


def tangent_perturbation(f: SphereMap, amplitude: float, seed: int = 0) -> SphereMap:
    """Add seeded Gaussian noise of size ``amplitude`` tangent to the sphere, then renormalize."""
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(f.values.shape)
    noise -= (noise * f.values).sum(axis=1, keepdims=True) * f.values
    return SphereMap(f.source, f.values + amplitude * noise)


# --------------------------------------------------------------------------
# energy and tension
# --------------------------------------------------------------------------


def _laplacian(space: SpectralSpace, u):
    return space.geometry.laplacian(u)


def sphere_energy(f: SphereMap):
    """(total, density) with density sum_i |grad f_i|^2 and total half its integral."""
    density = f.source.geometry.dirichlet_density(f.values)
    return 0.5 * float(f.source.mass @ density), density


def el_residual(f: SphereMap):
    """Tension field Delta_h f + e(f) f per sample and its mass-weighted L^2 norm."""
    _, density = sphere_energy(f)
    r = _laplacian(f.source, f.values) + density[:, None] * f.values
    return r, float(math.sqrt(f.source.mass @ (r**2).sum(axis=1)))


def max_operator_eigenvalue(space: SpectralSpace) -> float:
    """Largest eigenvalue of M^{-1} S."""
    geo = space.geometry
    if space.is_mesh:
        d = diags(1.0 / np.sqrt(geo.mesh.vertex_mass))
        return float(eigsh(d @ geo.mesh.stiffness @ d, k=1, which="LA", return_eigenvectors=False)[0])
    return float(geo.operator_basis[0].max())


@dataclass
class FlowResult:
    map: SphereMap
    converged: bool
    diverged: bool
    steps: int
    trace: list = field(default_factory=list)  # (step, energy, residual, eta)

    @property
    def energies(self) -> np.ndarray:
        return np.array([row[1] for row in self.trace])

    @property
    def residuals(self) -> np.ndarray:
        return np.array([row[2] for row in self.trace])

    def write_trace(self, path):
        return write_csv(path, ["step", "energy", "residual", "eta"], self.trace)


def harmonic_flow(
    f0: SphereMap,
    eta: float | None = None,
    max_steps: int = 5000,
    tol: float = 1e-6,
    backtrack: float = 0.5,
    min_eta: float = 1e-14,
) -> FlowResult:
    """Projected gradient flow ``f <- (f + eta Delta_h f) / |f + eta Delta_h f|``.

    A step that raises the energy is rejected and retried with
    ``eta * backtrack``.  The energy change of a step is evaluated as
    ``(1/2) <g - f, S (g + f)>``, which stays accurate when it is far below
    the rounding level of the energy itself; trace energies accumulate these
    changes, so they are nonincreasing exactly and agree with a fresh
    evaluation up to rounding.  Stops once the tension norm drops below
    ``tol``.  The default step is ``0.9 / lambda_max`` for the largest
    eigenvalue of ``M^{-1} S``.
    """
    space = f0.source
    if eta is None:
        eta = 0.9 / max_operator_eigenvalue(space)
    if not eta > 0 or not tol > 0:
        raise ValueError("eta and tol must be positive")
    f = f0.values
    energy, _ = sphere_energy(f0)
    _, res = el_residual(f0)
    trace = [(0, energy, res, eta)]
    step = 0
    diverged = False
    while res >= tol and step < max_steps:
        lap = _laplacian(space, f)
        while True:
            v = f + eta * lap
            g = v / np.linalg.norm(v, axis=1)[:, None]
            change = -0.5 * float(np.sum((g - f) * (space.mass[:, None] * _laplacian(space, g + f))))
            if change <= 0:
                e_new = energy + change
                break
            eta *= backtrack
            if eta < min_eta:
                diverged = True
                break
        if diverged:
            logger.warning("harmonic flow step collapsed at step %d (eta < %g)", step, min_eta)
            break
        step += 1
        f, energy = g, e_new
        _, res = el_residual(SphereMap(space, f))
        trace.append((step, energy, res, eta))
    return FlowResult(SphereMap(space, f), res < tol, diverged, step, trace)


# --------------------------------------------------------------------------
# eigenmaps and the Takahashi check
# --------------------------------------------------------------------------


@dataclass
class Eigenmap:
    map: SphereMap
    scale: float
    deviation: float
    eigenvalue: float
    indices: np.ndarray


def eigenmap(space: SpectralSpace, lam: float, k: int, threshold: float | None = None) -> Eigenmap:
    """c (phi_1, ..., phi_{k+1}) from the ``lam`` eigenspace, scaled to unit mean square norm.

    ``deviation`` is max_p |c^2 sum phi_i^2 - 1|; exceeding ``threshold``
    (default 1e-8 on model spaces, 0.05 on meshes) raises
    :class:`EigenmapError` instead of renormalizing silently.
    """
    idx = space.cluster_of(lam)
    if len(idx) < k + 1:
        raise EigenmapError(f"eigenspace of {lam:g} has dimension {len(idx)} < k+1 = {k + 1}")
    idx = idx[: k + 1]
    phi = space.eigenfunctions[:, idx]
    sq = (phi**2).sum(axis=1)
    c = 1.0 / math.sqrt(float(space.mass @ sq) / space.total_measure)
    deviation = float(np.abs(c * c * sq - 1.0).max())
    if threshold is None:
        threshold = 0.05 if space.is_mesh else 1e-8
    if deviation > threshold:
        raise EigenmapError(f"sum of squares is not constant (deviation {deviation:.3e} > {threshold:g})", deviation)
    return Eigenmap(SphereMap(space, c * phi), c, deviation, float(space.eigenvalues[idx].mean()), idx)


@dataclass(frozen=True)
class TakahashiTolerances:
    eigen: float = 1e-8
    isometry: float = maps.ISOMETRY_THRESHOLD
    density: float = 1e-6

    @classmethod
    def for_space(cls, space: SpectralSpace) -> "TakahashiTolerances":
        return cls(eigen=0.02, isometry=maps.ISOMETRY_THRESHOLD, density=0.02) if space.is_mesh else cls()


@dataclass
class TakahashiReport:
    dimension: int
    eigen_residuals: np.ndarray
    fitted_eigenvalues: np.ndarray
    isometry_defect: float
    direct_isometry_defect: float
    density_deviation: float
    el_residual: float
    clauses: dict
    tolerances: TakahashiTolerances
    t_schedule: list
    converse_consistent: bool

    @property
    def passed(self) -> bool:
        return all(self.clauses.values())

    @property
    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"

    @property
    def violated(self) -> list[str]:
        return [name for name, ok in self.clauses.items() if not ok]

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "violated": self.violated,
            "clauses": dict(self.clauses),
            "dimension": self.dimension,
            "eigen_residuals": self.eigen_residuals.tolist(),
            "fitted_eigenvalues": self.fitted_eigenvalues.tolist(),
            "isometry_defect": self.isometry_defect,
            "direct_isometry_defect": self.direct_isometry_defect,
            "density_deviation": self.density_deviation,
            "el_residual": self.el_residual,
            "converse_consistent": self.converse_consistent,
            "tolerances": vars(self.tolerances),
            "t_schedule": list(self.t_schedule),
        }


def sphere_target(k: int, t_min: float, decay: float = 1e-12) -> SpectralSpace:
    """Model S^k resolving every eigenvalue with e^{-2 lam t_min} above ``decay``."""
    lam_max = -math.log(decay) / (2 * t_min)
    if k == 1:
        K = int(math.ceil(math.sqrt(lam_max)))
        return build_model_space("circle", {}, P=max(64, 4 * K + 1), L=2 * K)
    if k == 2:
        deg = min(int(math.ceil((math.sqrt(1 + 4 * lam_max) - 1) / 2)), 39)
        return build_model_space("round_sphere", {"max_degree": deg + 1}, P=2 * (deg + 2) ** 2, L=(deg + 1) ** 2 - 1)
    raise ValueError("Takahashi checks support S^1 and S^2 targets")


def takahashi_check(
    f: SphereMap,
    t_schedule=(0.04, 0.02, 0.01),
    tolerances: TakahashiTolerances | None = None,
    target: SpectralSpace | None = None,
) -> TakahashiReport:
    """Test whether ``f`` is an eigenmap with eigenvalue n = dim X and an isometric immersion.

    Clauses: ``eigen_equation`` (relative residual of Delta f_i + n f_i per
    coordinate), ``isometry`` (max HS distance between the t -> 0
    extrapolation of the A-normalized pull-back f^* g_{S^k,t} and g_X) and
    ``energy_density`` (max |e(f) - n| / n).
    """
    space = f.source
    n = space.intrinsic_dim
    tol = TakahashiTolerances.for_space(space) if tolerances is None else tolerances
    ts = maps.check_schedule(t_schedule, "t_schedule")
    M = space.mass
    lap = _laplacian(space, f.values)
    norms = np.sqrt(M @ f.values**2)
    eig_res = np.sqrt(M @ (lap + n * f.values) ** 2) / norms
    fitted = -(M @ (lap * f.values)) / norms**2
    _, density = sphere_energy(f)
    dens_dev = float(np.abs(density - n).max() / n)

    grads = space.geometry.vector_gradient(f.values)  # (P, k+1, m)
    direct = np.einsum("pim,pin->pmn", grads, grads) - np.eye(n)
    direct_defect = float(np.sqrt((direct**2).sum(axis=(1, 2))).max())

    tgt = sphere_target(f.k, float(ts.min())) if target is None else target
    pm = maps.sphere_values_map(space, tgt, f.values)
    T0 = maps.extrapolated_pullback(pm, ts)
    iso = T0.values - np.eye(n)
    iso_defect = float(np.sqrt((iso**2).sum(axis=(1, 2))).max())

    clauses = {
        "eigen_equation": bool(eig_res.max() <= tol.eigen),
        "isometry": bool(iso_defect <= tol.isometry),
        "energy_density": bool(dens_dev <= tol.density),
    }
    converse = (not (clauses["eigen_equation"] and clauses["energy_density"])) or clauses["isometry"]
    return TakahashiReport(
        dimension=n,
        eigen_residuals=eig_res,
        fitted_eigenvalues=fitted,
        isometry_defect=iso_defect,
        direct_isometry_defect=direct_defect,
        density_deviation=dens_dev,
        el_residual=el_residual(f)[1],
        clauses=clauses,
        tolerances=tol,
        t_schedule=ts.tolist(),
        converse_consistent=bool(converse),
    )
