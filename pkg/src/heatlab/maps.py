"""Maps between spectral spaces and their heat-kernel energies.

A map ``f: X -> Y`` is seen through the target's eigenfunctions: the
composites ``phi_i^Y o f`` and their gradients on ``X`` give the lambda-energy
densities, the t-energy density ``e_{Y,t}(f) = sum e^{-2 lam_i t}
|grad(phi_i^Y o f)|^2`` and the pull-back tensor ``f^* g_{Y,t}``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .embed import (
    DimensionConstants,
    SymTensorField,
    TruncationError,
    choose_truncation,
    spectral_weights,
)
from .space import SpectralSpace, ball_measures

TRACE_TOL = 1e-10
N_PROBES = 32
FD_STEP = 1e-4
ISOMETRY_THRESHOLD = 0.05


class MapError(ValueError):
    """Inconsistent map definition."""


@dataclass(frozen=True, eq=False)
class PointMap:
    """A map from the samples of ``source`` into ``target``.

    ``kind == "analytic"``: ``target_coords`` holds f(x_p) in the target
    model's coordinates and ``jacobian[p]`` is the differential from the source
    frame at x_p to the target frame at f(x_p), shape (P, m_Y, m_X).

    ``kind == "vertex"``: ``assignment[p]`` is the target sample hit by x_p.
    """

    source: SpectralSpace
    target: SpectralSpace
    kind: str
    name: str = ""
    params: dict = field(default_factory=dict)
    target_coords: np.ndarray | None = None
    jacobian: np.ndarray | None = None
    assignment: np.ndarray | None = None

    def __post_init__(self):
        P = self.source.n_samples
        if self.kind == "vertex":
            a = np.asarray(self.assignment)
            if a.shape != (P,) or not np.issubdtype(a.dtype, np.integer):
                raise MapError(f"vertex assignment must be an integer array of length {P}")
            if a.min() < 0 or a.max() >= self.target.n_samples:
                raise MapError("vertex assignment indexes samples outside the target")
        elif self.kind == "analytic":
            if self.target.is_mesh:
                raise MapError("analytic maps need a model-space target")
            J = np.asarray(self.jacobian, float)
            shape = (P, self.target.intrinsic_dim, self.source.intrinsic_dim)
            if J.shape != shape:
                raise MapError(f"jacobian shape {J.shape} != {shape}")
            if len(self.target_coords) != P:
                raise MapError("target_coords must have one row per source sample")
        else:
            raise MapError(f"unknown map kind {self.kind!r}")

    def to_dict(self) -> dict:
        d = {"source_id": self.source.name, "target_id": self.target.name, "kind": self.kind}
        if self.kind == "vertex":
            d["assignment"] = np.asarray(self.assignment).tolist()
        else:
            d.update(name=self.name, params=dict(self.params))
        return d


_ANALYTIC = {}


def _register(name):
    def deco(fn):
        _ANALYTIC[name] = fn
        return fn

    return deco


def _model(space):
    if space.is_mesh:
        raise MapError(f"{space.name} is a mesh; analytic maps need model spaces")
    return space.geometry.model


def check_jacobian(fn, source: SpectralSpace, target: SpectralSpace, jacobian, n_probes=N_PROBES, h=FD_STEP):
    """Max deviation of the Jacobian from centered differences at evenly spaced probes.

    ``fn`` maps source model coordinates to target model coordinates.  The
    tolerance is O(h^2) relative to the Jacobian size.
    """
    sm, tm = _model(source), _model(target)
    idx = np.unique(np.linspace(0, source.n_samples - 1, n_probes).round().astype(int))
    x = source.coords[idx]
    err = 0.0
    for j in range(source.intrinsic_dim):
        fwd = tm.tangent_delta(fn(x), fn(sm.step(x, j, h)))
        bwd = tm.tangent_delta(fn(x), fn(sm.step(x, j, -h)))
        fd = (fwd - bwd) / (2 * h)
        err = max(err, float(np.abs(fd - jacobian[idx, :, j]).max()))
    scale = 1.0 + float(np.abs(jacobian[idx]).max())
    if err > 1e3 * h * h * scale:
        raise MapError(f"jacobian disagrees with finite differences (max error {err:.3e})")
    return err


def analytic_map(name: str, source: SpectralSpace, target: SpectralSpace | None = None, **params) -> PointMap:
    """Closed-form map by registry name (``identity``, ``circle_power``, ``constant``)."""
    if name not in _ANALYTIC:
        raise MapError(f"unknown analytic map {name!r}; choose from {sorted(_ANALYTIC)}")
    target = source if target is None else target
    fn, jac = _ANALYTIC[name](source, target, **params)
    check_jacobian(fn, source, target, jac)
    return PointMap(source, target, "analytic", name, params, fn(source.coords), jac)


def _shape_key(model):
    """Parameters fixing the geometry of a model, ignoring its sampling."""
    return {k: v for k, v in model.params.items() if k not in ("shape", "max_degree", "n_theta")}


@_register("identity")
def _identity(source, target):
    sm, tm = _model(source), _model(target)
    if sm.kind != tm.kind or _shape_key(sm) != _shape_key(tm):
        raise MapError("identity needs source and target of the same model geometry")
    m = source.intrinsic_dim
    return (lambda x: np.array(x, float)), np.broadcast_to(np.eye(m), (source.n_samples, m, m)).copy()


@_register("circle_power")
def _circle_power(source, target, k=2):
    sm, tm = _model(source), _model(target)
    if sm.kind != "circle" or tm.kind != "circle":
        raise MapError("circle_power maps a circle to a circle")
    k = int(k)

    def fn(x):
        return (k * np.asarray(x, float)) % (2 * np.pi)

    jac = np.full((source.n_samples, 1, 1), k * tm.R / sm.R)
    return fn, jac


@_register("constant")
def _constant(source, target, index=0):
    _model(source)
    _model(target)
    point = target.coords[int(index)]

    def fn(x):
        return np.broadcast_to(point, (len(x),) + point.shape).copy()

    return fn, np.zeros((source.n_samples, target.intrinsic_dim, source.intrinsic_dim))


def identity_map(space: SpectralSpace) -> PointMap:
    if space.is_mesh:
        return vertex_map(space, space, np.arange(space.n_samples))
    return analytic_map("identity", space)


def circle_power_map(source: SpectralSpace, k: int, target: SpectralSpace | None = None) -> PointMap:
    """theta -> k theta, the degree-k self-map of the circle."""
    return analytic_map("circle_power", source, target, k=k)


def constant_map(source: SpectralSpace, target: SpectralSpace | None = None, index: int = 0) -> PointMap:
    target = source if target is None else target
    if source.is_mesh or target.is_mesh:
        return vertex_map(source, target, np.full(source.n_samples, int(index)))
    return analytic_map("constant", source, target, index=index)


def vertex_map(source: SpectralSpace, target: SpectralSpace, assignment) -> PointMap:
    return PointMap(source, target, "vertex", "vertex", {}, assignment=np.asarray(assignment, dtype=np.int64))


def nearest_assignment(source: SpectralSpace, target: SpectralSpace, points) -> np.ndarray:
    """Target sample closest (in the target's embedding) to each row of ``points``."""
    from scipy.spatial import cKDTree

    return cKDTree(target.embedded_points()).query(points)[1].astype(np.int64)


def sphere_values_map(source: SpectralSpace, target: SpectralSpace, values, name="sphere_map") -> PointMap:
    """Wrap unit-sphere valued samples as a map into a circle or round-sphere model.

    The Jacobian is built from discrete gradients of the ambient coordinate
    functions projected onto the target frames, so no finite-difference check
    applies.
    """
    tm = _model(target)
    v = np.asarray(values, float)
    if tm.kind == "circle" and v.shape[1] == 2:
        coords = (np.arctan2(v[:, 1], v[:, 0]) % (2 * np.pi))[:, None]
    elif tm.kind == "round_sphere" and v.shape[1] == 3:
        coords = v
    else:
        raise MapError("sphere-valued maps need a circle (k=1) or round_sphere (k=2) target")
    if tm.kind == "circle" and tm.R != 1.0:
        raise MapError("sphere-valued maps need the unit circle as target")
    grads = source.geometry.vector_gradient(v)  # (P, k+1, m_X), ambient rows
    jac = np.einsum("pyd,pdm->pym", tm.frames(coords), grads)
    return PointMap(source, target, "analytic", name, {}, coords, jac)


# --------------------------------------------------------------------------
# composition and energies
# --------------------------------------------------------------------------


def compose_eigenfunctions(f: PointMap, l: int | None = None, first: int = 0):
    """Values (P, K) and source gradients (P, K, m_X) of phi_i^Y o f for i = first..l."""
    l = f.target.cutoff if l is None else int(l)
    if not 0 <= first <= l <= f.target.cutoff:
        raise ValueError(f"eigen index {l} exceeds the target cutoff {f.target.cutoff}")
    if f.kind == "vertex":
        vals = f.target.eigenfunctions[f.assignment, first : l + 1]
        return vals, f.source.gradient(vals)
    modes = f.target.geometry.modes[first : l + 1]
    vals, gy = f.target.geometry.model.evaluate(f.target_coords, modes)
    return vals, gy @ f.jacobian


def _gradient_blocks(f: PointMap, l: int, block: int = 128):
    """Yield (indices, gradients) of phi_i^Y o f for i = 1..l in column blocks."""
    for a in range(1, l + 1, block):
        b = min(a + block - 1, l)
        yield np.arange(a, b + 1), compose_eigenfunctions(f, b, a)[1]


def _weighted_pullbacks(f: PointMap, l: int, weights):
    """Densities and tensors sum_i w_i grad_i (x) grad_i for each weight vector over i = 1..l."""
    P, m = f.source.n_samples, f.source.intrinsic_dim
    dens = [np.zeros(P) for _ in weights]
    tens = [np.zeros((P, m, m)) for _ in weights]
    for idx, G in _gradient_blocks(f, l):
        Gt = np.ascontiguousarray(G.transpose(0, 2, 1))
        for w, d, T in zip(weights, dens, tens):
            wb = w[idx - 1]
            if not wb.any():
                continue
            Gw = G * wb[None, :, None]
            d += (Gw * G).sum(axis=(1, 2))
            T += Gt @ Gw
    return dens, tens


def compose_eigenfunction(f: PointMap, j: int):
    """phi_j^Y o f and its gradient on the source."""
    vals, grads = compose_eigenfunctions(f, j, j)
    return vals[:, 0], grads[:, 0]


def lambda_energy_density(f: PointMap, lam: float) -> np.ndarray:
    """sum over the lam-eigenspace of |grad(phi_i^Y o f)|^2."""
    idx = f.target.cluster_of(lam)
    _, grads = compose_eigenfunctions(f, int(idx[-1]), int(idx[0]))
    return (grads**2).sum(axis=(1, 2))


@dataclass
class EnergyReport:
    total: float
    density: np.ndarray
    t: float | None
    l: int
    normalization: str = "raw"
    tensor: SymTensorField | None = None
    trace_error: float = 0.0
    density_bound_ok: bool = True
    normalized_total: float | None = None

    def to_dict(self, include_samples: bool = False) -> dict:
        d = {
            "total": self.total,
            "normalized_total": self.normalized_total,
            "normalization": self.normalization,
            "t": self.t,
            "l": self.l,
            "trace_error": self.trace_error,
            "density_bound_ok": self.density_bound_ok,
        }
        if include_samples:
            d["density"] = self.density.tolist()
        return d


def _resolve_target_l(f, l):
    if l is None:
        return f.target.complete_cutoff()
    l = int(l)
    if not 1 <= l <= f.target.cutoff:
        raise ValueError(f"l={l} must lie in [1, {f.target.cutoff}]")
    return l


def t_energy(f: PointMap, t: float, l: int | None = None) -> EnergyReport:
    """t-energy of ``f`` with density, pull-back tensor and consistency checks."""
    if not t > 0:
        raise ValueError(f"diffusion time t must be positive (got {t!r})")
    l = _resolve_target_l(f, l)
    w = spectral_weights(f.target.eigenvalues[1 : l + 1], t, 2.0)
    (density,), (tvals,) = _weighted_pullbacks(f, l, [w])
    tensor = SymTensorField(tvals, f.source.name)
    # <f^* g_{Y,t}, g_X> is the trace in an orthonormal frame
    trace_error = float(np.abs(tensor.trace() - density).max() / max(1.0, float(density.max())))
    if trace_error > TRACE_TOL:
        raise ArithmeticError(f"pull-back trace identity violated ({trace_error:.3e})")
    bound_ok = bool(np.all(tensor.hs_norm() <= density * (1 + 1e-12) + 1e-300))
    if not bound_ok:
        raise ArithmeticError("pull-back tensor exceeds the energy density")
    total = 0.5 * float(f.source.mass @ density)
    scale = DimensionConstants(f.target.intrinsic_dim).scale(t)
    return EnergyReport(total, density, t, l, "raw", tensor, trace_error, bound_ok, scale * total)


def close_cluster(space: SpectralSpace, l: int) -> int:
    """Raise ``l`` to the end of its eigenvalue cluster when that cluster is complete."""
    for i, c in enumerate(space.clusters):
        if c[0] <= l <= c[-1]:
            if i == len(space.clusters) - 1 and not space.last_cluster_complete:
                return l
            return int(c[-1])
    return l


def _target_ball_measures(f: PointMap, r: float):
    """mu_Y(B_r(f(x_p))) and a flag set when the target cannot resolve the ball."""
    tgt = f.target
    if f.kind == "analytic":
        return tgt.geometry.ball_measure(f.target_coords, r), False
    if r < 2 * tgt.spacing:
        omega = DimensionConstants(tgt.intrinsic_dim).omega
        return np.full(f.source.n_samples, omega * r**tgt.intrinsic_dim), True
    return ball_measures(tgt, r)[f.assignment], False


@dataclass
class NormalizedEnergy:
    t: np.ndarray
    l: np.ndarray
    A: np.ndarray
    B: np.ndarray
    under_resolved: np.ndarray
    extrapolated_A: float
    extrapolated_B: float
    verdict: str
    densities: list = field(default_factory=list, repr=False)

    @property
    def bounded(self) -> bool:
        return self.verdict == "bounded on schedule"

    def to_dict(self) -> dict:
        return {
            "t": self.t.tolist(),
            "l": self.l.tolist(),
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "under_resolved": self.under_resolved.tolist(),
            "extrapolated_A": self.extrapolated_A,
            "extrapolated_B": self.extrapolated_B,
            "verdict": self.verdict,
        }

    def csv_rows(self):
        return [(t, a, b) for t, a, b in zip(self.t, self.A, self.B)]


def check_schedule(values, name: str, decreasing: bool = True) -> np.ndarray:
    v = np.asarray(values, float)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"{name} must be a non-empty list")
    if not np.all(v > 0):
        raise ValueError(f"{name} entries must be positive")
    steps = np.diff(v)
    if v.size > 1 and not (np.all(steps < 0) if decreasing else np.all(steps > 0)):
        raise ValueError(f"{name} must be strictly {'decreasing' if decreasing else 'increasing'}")
    return v


def extrapolate_to_zero(x, y, degree: int) -> float:
    """Polynomial fit in ``x`` evaluated at 0 (Richardson-style)."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    if x.size == 0:
        return math.nan
    degree = max(0, min(degree, x.size - 1))
    return float(np.polyval(np.polyfit(x, y, degree), 0.0))


def normalized_energy(f: PointMap, t_schedule, delta: float | None = 1e-8, growth: float = 1.1) -> NormalizedEnergy:
    """A- and B-normalized t-energies over a decreasing schedule.

    A: ``c_N t^{(N+2)/2} E_t``.  B: ``(1/2) sum mu_p tilde_c_N t mu_Y(B_sqrt(t)(f(x_p))) e_t(p)``,
    normalized like A so both tend to the same limit.  ``N`` is the target
    dimension.  The cutoff per t comes from :func:`choose_truncation` with
    ``delta``; ``delta=None`` uses the target's complete cutoff.  The verdict
    is "bounded on schedule" when every B value is at most ``growth`` times
    its predecessor.
    """
    ts = check_schedule(t_schedule, "t_schedule")
    const = DimensionConstants(f.target.intrinsic_dim)
    L = []
    for t in ts:
        if delta is None:
            L.append(f.target.complete_cutoff())
            continue
        try:
            L.append(close_cluster(f.target, choose_truncation(f.target, t, delta).l))
        except TruncationError:
            warnings.warn(f"truncation tail not reached at t={t}; using the full spectrum", stacklevel=2)
            L.append(f.target.cutoff)
    l_max = max(L)
    lam = f.target.eigenvalues[1 : l_max + 1]
    weights = []
    for t, l in zip(ts, L):
        w = spectral_weights(lam, t, 2.0)
        w[l:] = 0.0
        weights.append(w)
    densities, _ = _weighted_pullbacks(f, l_max, weights)
    A, B, flags = [], [], []
    for t, density in zip(ts, densities):
        mu, flag = _target_ball_measures(f, math.sqrt(t))
        A.append(const.scale(t) * 0.5 * float(f.source.mass @ density))
        B.append(0.5 * float(f.source.mass @ (const.tilde_c * t * mu * density)))
        flags.append(flag)
    A, B, flags = np.array(A), np.array(B), np.array(flags)
    good = ~flags
    degree = min(f.source.intrinsic_dim - 1, 2)
    ex_A = extrapolate_to_zero(ts[good], A[good], degree)
    ex_B = extrapolate_to_zero(ts[good], B[good], degree)
    Bg = B[good]
    ok = bool(np.all(Bg[1:] <= growth * Bg[:-1] + 1e-300))
    verdict = "bounded on schedule" if ok else "unbounded on schedule"
    return NormalizedEnergy(ts, np.array(L), A, B, flags, ex_A, ex_B, verdict, densities)


def tensor_norms(T) -> tuple[np.ndarray, np.ndarray]:
    """Hilbert-Schmidt and bound (operator) norms per sample."""
    T = T if isinstance(T, SymTensorField) else SymTensorField(T)
    hs, bd = T.hs_norm(), T.bound_norm()
    slack = 1e-12 * (1.0 + hs)
    if np.any(bd > hs + slack) or np.any(hs > math.sqrt(T.dim) * bd + slack):
        raise ArithmeticError("tensor norm inequality chain violated")
    return hs, bd


@dataclass
class UpperGradient:
    field: np.ndarray
    lipschitz: np.ndarray | None
    t: float
    l: int


def upper_gradient_estimate(f: PointMap, t: float, l: int | None = None) -> UpperGradient:
    """sqrt(|c_N t^{(N+2)/2} f^* g_{Y,t}|_B) per sample, with |J|_op for analytic maps."""
    rep = t_energy(f, t, l)
    scale = DimensionConstants(f.target.intrinsic_dim).scale(t)
    G = np.sqrt(rep.tensor.scaled(scale).bound_norm())
    lip = None
    if f.kind == "analytic":
        lip = np.linalg.norm(f.jacobian, ord=2, axis=(1, 2))
    return UpperGradient(G, lip, t, rep.l)


def isometry_defect(f: PointMap, t: float, l: int | None = None) -> float:
    """max_p |c_N t^{(N+2)/2} f^* g_{Y,t} - g_X|_HS."""
    rep = t_energy(f, t, l)
    scale = DimensionConstants(f.target.intrinsic_dim).scale(t)
    diff = rep.tensor.values * scale - np.eye(f.source.intrinsic_dim)
    return float(np.sqrt((diff**2).sum(axis=(1, 2))).max())


def is_isometric(f: PointMap, t: float, l: int | None = None, threshold: float = ISOMETRY_THRESHOLD) -> bool:
    return isometry_defect(f, t, l) <= threshold


def extrapolated_pullback(f: PointMap, t_schedule, l: int | None = None) -> SymTensorField:
    """Per-sample t -> 0 extrapolation of the A-normalized pull-back tensor.

    Each tensor component is fitted by a polynomial in t of degree
    min(n - 1, 2) (n the source dimension) over the schedule.
    """
    ts = check_schedule(t_schedule, "t_schedule")
    scale = DimensionConstants(f.target.intrinsic_dim).scale
    l = _resolve_target_l(f, l)
    lam = f.target.eigenvalues[1 : l + 1]
    _, tens = _weighted_pullbacks(f, l, [spectral_weights(lam, t, 2.0) for t in ts])
    stack = np.stack([T * scale(t) for T, t in zip(tens, ts)])
    degree = max(0, min(f.source.intrinsic_dim - 1, 2, len(ts) - 1))
    flat = stack.reshape(len(ts), -1)
    coef = np.polyfit(ts, flat, degree)
    return SymTensorField(coef[-1].reshape(stack.shape[1:]), f.source.name)
