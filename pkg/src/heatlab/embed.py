"""Heat kernel, truncated heat-kernel embeddings and their metric distortion."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .space import SpectralSpace, ball_measures, ball_sums

logger = logging.getLogger(__name__)

UNDERFLOW = 1e-300


class TruncationError(ValueError):
    """The requested tail bound cannot be met with the stored spectrum."""


@dataclass(frozen=True)
class DimensionConstants:
    """Normalizing constants of the N-dimensional heat-kernel embedding."""

    N: int

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("dimension must be a positive integer")

    @property
    def c(self) -> float:
        return 4.0 * (8.0 * math.pi) ** (self.N / 2)

    @property
    def omega(self) -> float:
        """Volume of the unit ball in R^N."""
        return math.pi ** (self.N / 2) / math.gamma(self.N / 2 + 1)

    @property
    def tilde_c(self) -> float:
        return self.c / self.omega

    def scale(self, t: float) -> float:
        """c_N t^{(N+2)/2}, the pull-back normalization."""
        return self.c * t ** ((self.N + 2) / 2)


@dataclass(frozen=True, eq=False)
class SymTensorField:
    """Symmetric m x m matrix per sample, in the sample's tangent frame."""

    values: np.ndarray
    space_name: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, float)
        object.__setattr__(self, "values", 0.5 * (v + np.swapaxes(v, -1, -2)))

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    def hs_norm(self) -> np.ndarray:
        return np.sqrt((self.values**2).sum(axis=(-1, -2)))

    def bound_norm(self) -> np.ndarray:
        return np.abs(np.linalg.eigvalsh(self.values)).max(axis=-1)

    def trace(self) -> np.ndarray:
        return np.trace(self.values, axis1=-2, axis2=-1)

    def scaled(self, factor) -> "SymTensorField":
        f = np.asarray(factor, float).reshape((-1, 1, 1)) if np.ndim(factor) else factor
        return SymTensorField(self.values * f, self.space_name)


class Truncation(NamedTuple):
    l: int
    tail: float


@dataclass
class DistortionField:
    values: np.ndarray
    t: float
    l: int
    normalization: str
    under_resolved: bool = False


@dataclass
class DistortionReport:
    space: str
    t: float
    l: int
    normalization: str = "A"
    norms: dict = field(default_factory=dict)
    distortion: np.ndarray | None = None
    rho: float | None = None
    local_ratio_min: float | None = None
    local_ratio_max: float | None = None
    global_ratio_min: float | None = None
    global_ratio_max: float | None = None
    local_witness: dict | None = None
    global_witness: dict | None = None
    injectivity_gap: float | None = None
    n_pairs: int | None = None
    seed: int | None = None
    smoothable_fraction: float | None = None
    under_resolved: bool = False

    def to_dict(self, include_samples: bool = False) -> dict:
        d = asdict(self)
        d["distortion"] = self.distortion.tolist() if include_samples and self.distortion is not None else None
        return d


def _check_t(t):
    if not t > 0:
        raise ValueError(f"diffusion time t must be positive (got {t!r})")


def _resolve_l(space: SpectralSpace, l):
    if l is None:
        return space.complete_cutoff()
    l = int(l)
    if not 1 <= l <= space.cutoff:
        raise ValueError(f"truncation l={l} must lie in [1, {space.cutoff}]")
    return l


def spectral_weights(eigenvalues, t, power=1.0) -> np.ndarray:
    """exp(-power * lam * t) with values below 1e-300 flushed to exactly zero."""
    with np.errstate(under="ignore"):
        w = np.exp(-power * np.asarray(eigenvalues) * t)
    w[w < UNDERFLOW] = 0.0
    return w


def heat_kernel(space: SpectralSpace, p, q, t: float, l: int | None = None):
    """Truncated spectral heat kernel sum_{i<=l} e^{-lam_i t} phi_i(p) phi_i(q).

    ``p`` and ``q`` may be integers or broadcastable index arrays.
    """
    _check_t(t)
    l = space.cutoff if l is None else _resolve_l(space, l)
    w = spectral_weights(space.eigenvalues[: l + 1], t)
    phi = space.eigenfunctions[:, : l + 1]
    p, q = np.broadcast_arrays(np.asarray(p), np.asarray(q))
    out = np.einsum("...i,i,...i->...", phi[p], w, phi[q])
    return float(out) if out.ndim == 0 else out


def embedding_coords(space: SpectralSpace, p, t: float, l: int) -> np.ndarray:
    """Normalized truncated embedding sqrt(c_N) t^{(N+2)/4} (e^{-lam_i t} phi_i(p))_{i=1..l}.

    The constant eigenfunction is skipped.  ``p`` may be an index array, in
    which case rows are returned.
    """
    _check_t(t)
    l = _resolve_l(space, l)
    const = DimensionConstants(space.intrinsic_dim)
    w = spectral_weights(space.eigenvalues[1 : l + 1], t) * math.sqrt(const.scale(t))
    return space.eigenfunctions[p, 1 : l + 1] * w


def _gradient_sup(space: SpectralSpace) -> np.ndarray:
    return (space.eigengradients**2).sum(axis=-1).max(axis=0)


def _tail_terms(space, t):
    # terms e^{-2 lam_i t} sup|grad phi_i|^2 for i = 0..L
    return spectral_weights(space.eigenvalues, t, 2.0) * _gradient_sup(space)


def _extrapolated_tail(terms) -> float:
    """Geometric bound on the part of the series beyond the stored cutoff."""
    L = len(terms) - 1
    m = max(4, L // 4)
    last = terms[max(1, L - m + 1) :]
    pos = last > 0
    if not pos.any():
        return 0.0
    if pos.sum() < 2:
        return float(last.max())
    idx = np.arange(len(last))[pos]
    slope, icpt = np.polyfit(idx, np.log(last[pos]), 1)
    ratio = math.exp(slope)
    if ratio >= 1.0:
        return math.inf
    anchor = max(float(last[-1]), math.exp(icpt + slope * (len(last) - 1)))
    return anchor * ratio / (1.0 - ratio)


def truncation_tail(space: SpectralSpace, t: float, l: int) -> float:
    """c_N t^{(N+2)/2} sum_{i>l} e^{-2 lam_i t} sup|grad phi_i|^2 (extrapolated past L)."""
    _check_t(t)
    terms = _tail_terms(space, t)
    tail = terms[l + 1 :].sum() + _extrapolated_tail(terms)
    return DimensionConstants(space.intrinsic_dim).scale(t) * tail


def choose_truncation(space: SpectralSpace, t: float, delta: float) -> Truncation:
    """Smallest cutoff l whose gradient tail is below ``delta``."""
    _check_t(t)
    if not delta > 0:
        raise ValueError("delta must be positive")
    terms = _tail_terms(space, t)
    scale = DimensionConstants(space.intrinsic_dim).scale(t)
    beyond = _extrapolated_tail(terms)
    # suffix[l] = sum_{i > l} terms[i] for l = 0..L
    suffix = np.concatenate([np.cumsum(terms[::-1])[::-1][1:], [0.0]]) + beyond
    tails = scale * suffix
    ok = np.flatnonzero(tails[1:] < delta)
    if ok.size == 0:
        raise TruncationError(
            f"tail bound {tails[-1]:.3e} at l=L={space.cutoff} exceeds delta={delta:.1e}; increase L"
        )
    l = int(ok[0]) + 1
    return Truncation(l, float(tails[l]))


def pullback_metric(space: SpectralSpace, t: float, l: int | None = None) -> SymTensorField:
    """g_t = sum_{i=1}^{l} e^{-2 lam_i t} grad phi_i (x) grad phi_i per sample."""
    _check_t(t)
    l = _resolve_l(space, l)
    w = spectral_weights(space.eigenvalues[1 : l + 1], t, 2.0)
    g = space.eigengradients[:, 1 : l + 1]
    return SymTensorField(np.einsum("pim,pin,i->pmn", g, g, w), space.name)


def distortion_field(
    space: SpectralSpace, t: float, l: int | None = None, normalization: str = "A"
) -> DistortionField:
    """Per-sample |g_X - normalized g_t|_HS.

    Normalization ``A`` scales by c_N t^{(N+2)/2}; ``B`` by
    tilde_c_N t mu(B_sqrt(t)(x)).  When sqrt(t) is below twice the sample
    spacing, ``B`` falls back to omega_N t^{N/2} and sets ``under_resolved``.
    """
    _check_t(t)
    l = _resolve_l(space, l)
    g = pullback_metric(space, t, l).values
    const = DimensionConstants(space.intrinsic_dim)
    under = False
    if normalization == "A":
        scale = np.full(space.n_samples, const.scale(t))
    elif normalization == "B":
        r = math.sqrt(t)
        if r < 2 * space.spacing:
            under = True
            warnings.warn(f"ball radius sqrt(t)={r:.3g} under-resolved; using omega_N t^(N/2)", stacklevel=2)
            mu = np.full(space.n_samples, const.omega * t ** (space.intrinsic_dim / 2))
        else:
            mu = ball_measures(space, r)
        scale = const.tilde_c * t * mu
    else:
        raise ValueError(f"unknown normalization {normalization!r} (expected 'A' or 'B')")
    eye = np.eye(space.intrinsic_dim)
    diff = eye - scale[:, None, None] * g
    values = np.sqrt((diff**2).sum(axis=(1, 2)))
    return DistortionField(values, t, l, normalization, under)


def distortion_norm(field, p, space: SpectralSpace, normalized: bool = False) -> float:
    """Mass-weighted L^p norm of a sample field; ``p=inf`` gives the max.

    With ``normalized=True`` the measure is rescaled to a probability measure.
    """
    values = np.abs(getattr(field, "values", field))
    if p == math.inf or p == "inf":
        return float(values.max())
    p = float(p)
    if p < 1:
        raise ValueError("exponent must be >= 1")
    w = space.mass / space.total_measure if normalized else space.mass
    return float((w @ values**p) ** (1.0 / p))


def default_radius_grid(space: SpectralSpace, tau: float, count: int = 8) -> np.ndarray:
    lo = max(2 * space.spacing, tau / 64)
    if lo >= tau:
        return np.array([tau])
    return np.geomspace(lo, tau, count)


def ball_averages(space: SpectralSpace, values, r: float) -> np.ndarray:
    """mu-weighted average of ``values`` over B_r(x_p) for every sample."""
    return ball_sums(space, r, values=values) / ball_measures(space, r)


@dataclass
class SmoothableSet:
    mask: np.ndarray
    fraction: float
    radii: np.ndarray
    skipped: list


def smoothable_set(
    space: SpectralSpace, eps: float, t: float, tau: float, radius_grid=None, l: int | None = None
) -> SmoothableSet:
    """Samples whose ball-averaged A-distortion stays <= eps for every radius."""
    if not (eps > 0 and t > 0 and tau > 0):
        raise ValueError("eps, t and tau must be positive")
    radii = default_radius_grid(space, tau) if radius_grid is None else np.asarray(radius_grid, float)
    if np.any(radii <= 0) or np.any(radii > tau * (1 + 1e-12)):
        raise ValueError("radius_grid must lie in (0, tau]")
    dist = distortion_field(space, t, l, "A").values
    mask = np.ones(space.n_samples, bool)
    used, skipped = [], []
    for r in radii:
        if r < space.spacing:
            warnings.warn(f"radius {r:.3g} is below the sample spacing; skipped", stacklevel=2)
            skipped.append(float(r))
            continue
        used.append(float(r))
        mask &= ball_averages(space, dist, r) <= eps
    return SmoothableSet(mask, float(space.mass[mask].sum() / space.total_measure), np.array(used), skipped)


def distortion_report(
    space: SpectralSpace, t: float, l: int | None = None, normalization: str = "A", exponents=(1, 2)
) -> DistortionReport:
    fld = distortion_field(space, t, l, normalization)
    norms = {f"L{p:g}": distortion_norm(fld, p, space) for p in exponents}
    norms["Linf"] = distortion_norm(fld, math.inf, space)
    return DistortionReport(
        space=space.name,
        t=t,
        l=fld.l,
        normalization=normalization,
        norms=norms,
        distortion=fld.values,
        under_resolved=fld.under_resolved,
    )


def _pair_ratios(space, coords, p, q):
    if space.is_mesh:
        d = space.geometry.point_distance(p, q)
    else:
        d = space.geometry.point_distance(space.coords[p], space.coords[q])
    keep = d > 0
    p, q, d = p[keep], q[keep], d[keep]
    gap = np.linalg.norm(coords[p] - coords[q], axis=1)
    return p, q, d, gap


def _witness(space, p, q, d, ratio, i):
    return {"p": int(p[i]), "q": int(q[i]), "distance": float(d[i]), "ratio": float(ratio[i])}


def bilipschitz_report(
    space: SpectralSpace,
    t: float,
    l: int | None,
    rho: float,
    n_pairs: int = 2000,
    seed: int = 0,
    separation: float = 0.5,
) -> DistortionReport:
    """Lipschitz ratios |Phi(p) - Phi(q)| / d(p, q) of the truncated embedding.

    ``n_pairs`` local pairs (d <= rho) and as many unrestricted pairs are drawn
    with ``numpy.random.default_rng(seed)``.  ``injectivity_gap`` is the
    smallest embedded distance among global pairs at least ``separation``
    apart.
    """
    if not rho > 0:
        raise ValueError("locality radius rho must be positive")
    l = _resolve_l(space, l)
    rng = np.random.default_rng(seed)
    coords = embedding_coords(space, np.arange(space.n_samples), t, l)

    lp = rng.integers(space.n_samples, size=n_pairs)
    lq = np.empty(n_pairs, dtype=np.int64)
    order = np.argsort(lp, kind="stable")
    for start in range(0, n_pairs, 256):
        idx = order[start : start + 256]
        rows = space.distance_rows(lp[idx])
        for k, i in enumerate(idx):
            cand = np.flatnonzero((rows[k] <= rho) & (rows[k] > 0))
            lq[i] = cand[rng.integers(len(cand))] if cand.size else lp[i]
    gp = rng.integers(space.n_samples, size=n_pairs)
    gq = rng.integers(space.n_samples, size=n_pairs)

    p, q, d, gap = _pair_ratios(space, coords, lp, lq)
    ratio = gap / d
    P2, Q2, D2, gap2 = _pair_ratios(space, coords, gp, gq)
    ratio2 = gap2 / D2
    far = D2 >= separation
    fld = distortion_field(space, t, l, "A")
    return DistortionReport(
        space=space.name,
        t=t,
        l=l,
        norms={"L1": distortion_norm(fld, 1, space), "Linf": distortion_norm(fld, math.inf, space)},
        distortion=fld.values,
        rho=rho,
        local_ratio_min=float(ratio.min()),
        local_ratio_max=float(ratio.max()),
        global_ratio_min=float(ratio2.min()),
        global_ratio_max=float(ratio2.max()),
        local_witness=_witness(space, p, q, d, ratio, int(np.argmin(ratio))),
        global_witness=_witness(space, P2, Q2, D2, ratio2, int(np.argmin(ratio2))),
        injectivity_gap=float(gap2[far].min()) if far.any() else None,
        n_pairs=int(len(d)),
        seed=seed,
    )
