"""Spectral representations of metric-measure spaces.

A :class:`SpectralSpace` bundles quadrature weights, the lowest eigenpairs of
the (minus) Laplacian, eigenfunction gradients in per-sample orthonormal
tangent frames and a geodesic distance oracle.  Model spaces (circle,
interval, flat torus, round sphere) carry closed-form spectra sampled on
grids whose quadrature makes the sampled eigenfunctions exactly orthonormal;
meshes use the cotangent Laplacian with a lumped mass matrix.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np
import scipy.linalg
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse import linalg as splinalg
from scipy.spatial import cKDTree
from scipy.special import roots_legendre, sph_legendre_p

from .mesh import Mesh

logger = logging.getLogger(__name__)

TOL_EIG = 1e-9
TOL_ORTH = 1e-8
TOL_DIST = 1e-12
SPHERE_MAX_DEGREE = 40
SCHEMA_VERSION = 1
MODEL_KINDS = ("circle", "interval", "flat_torus", "round_sphere")


class SpectrumError(RuntimeError):
    """Eigensolver failure; ``diagnostics`` holds iteration details."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def group_eigenvalues(eigenvalues) -> list[np.ndarray]:
    """Split sorted eigenvalues into multiplicity clusters.

    Consecutive values are merged when ``|a - b| <= max(1e-8, 1e-6 * b)``.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    clusters, start = [], 0
    for i in range(1, len(lam)):
        if abs(lam[i] - lam[i - 1]) > max(1e-8, 1e-6 * abs(lam[i])):
            clusters.append(np.arange(start, i))
            start = i
    clusters.append(np.arange(start, len(lam)))
    return clusters


# --------------------------------------------------------------------------
# closed-form model spaces
# --------------------------------------------------------------------------


def _wrap(d, period):
    d = np.abs(d) % period
    return np.minimum(d, period - d)


def _centered_periodic(u, h, axis=0):
    return (np.roll(u, -1, axis=axis) - np.roll(u, 1, axis=axis)) / (2 * h)


class _Circle:
    kind = "circle"
    dim = 1

    def __init__(self, P, radius=1.0):
        if radius <= 0:
            raise ValueError("circle radius must be positive")
        self.P, self.R = P, float(radius)
        self.length = 2 * np.pi * self.R
        self.h = self.length / P
        self.coords = (2 * np.pi * np.arange(P) / P)[:, None]
        self.mass = np.full(P, self.h)
        self.diameter = np.pi * self.R
        self.params = {"radius": self.R}

    def modes(self, count):
        out = [(0, "c")]
        k = 1
        while len(out) < count:
            out += [(k, "c"), (k, "s")]
            k += 1
        return out[:count]

    def full_modes(self):
        out = self.modes(self.P - (1 - self.P % 2))
        if self.P % 2 == 0:
            out.append((self.P // 2, "n"))
        return out

    def resolves(self, modes):
        return all(2 * k < self.P for k, tag in modes if tag != "n")

    def eigenvalue(self, mode):
        return (mode[0] / self.R) ** 2

    def evaluate(self, coords, modes):
        th = np.asarray(coords, float)[:, 0]
        R = self.R
        vals = np.empty((len(th), len(modes)))
        grads = np.empty((len(th), len(modes), 1))
        for c, (k, tag) in enumerate(modes):
            if k == 0 or tag == "n":
                a = 1 / np.sqrt(2 * np.pi * R)
                vals[:, c] = a * np.cos(k * th)
                grads[:, c, 0] = -a * k / R * np.sin(k * th)
            elif tag == "c":
                a = 1 / np.sqrt(np.pi * R)
                vals[:, c] = a * np.cos(k * th)
                grads[:, c, 0] = -a * k / R * np.sin(k * th)
            else:
                a = 1 / np.sqrt(np.pi * R)
                vals[:, c] = a * np.sin(k * th)
                grads[:, c, 0] = a * k / R * np.cos(k * th)
        return vals, grads

    def frames(self, coords):
        th = np.asarray(coords, float)[:, 0]
        return np.stack([-np.sin(th), np.cos(th)], axis=1)[:, None, :]

    def embed(self, coords):
        th = np.asarray(coords, float)[:, 0]
        return self.R * np.stack([np.cos(th), np.sin(th)], axis=1)

    def distance(self, a, b):
        return self.R * _wrap(np.asarray(a)[..., 0] - np.asarray(b)[..., 0], 2 * np.pi)

    def ball_measure(self, coords, r):
        return np.full(len(coords), min(2 * r, self.length))

    def step(self, coords, j, h):
        return coords + h / self.R

    def tangent_delta(self, a, b):
        d = (np.asarray(b)[..., 0] - np.asarray(a)[..., 0] + np.pi) % (2 * np.pi) - np.pi
        return (self.R * d)[..., None]

    def fd_gradient(self, u):
        return _centered_periodic(np.asarray(u, float), self.h)[..., None]


class _Interval:
    kind = "interval"
    dim = 1

    def __init__(self, P, length=np.pi):
        if length <= 0:
            raise ValueError("interval length must be positive")
        self.P, self.ell = P, float(length)
        self.h = self.ell / (P - 1)
        self.coords = np.linspace(0.0, self.ell, P)[:, None]
        w = np.full(P, self.h)
        w[[0, -1]] *= 0.5
        self.mass = w
        self.length = self.ell
        self.diameter = self.ell
        self.params = {"length": self.ell}

    def modes(self, count):
        return [(k, "c") for k in range(count)]

    def full_modes(self):
        return self.modes(self.P - 1) + [(self.P - 1, "n")]

    def resolves(self, modes):
        return all(k < self.P - 1 for k, tag in modes if tag != "n")

    def eigenvalue(self, mode):
        return (mode[0] * np.pi / self.ell) ** 2

    def evaluate(self, coords, modes):
        x = np.asarray(coords, float)[:, 0]
        vals = np.empty((len(x), len(modes)))
        grads = np.empty((len(x), len(modes), 1))
        for c, (k, tag) in enumerate(modes):
            w = k * np.pi / self.ell
            a = 1 / np.sqrt(self.ell) if (k == 0 or tag == "n") else np.sqrt(2 / self.ell)
            vals[:, c] = a * np.cos(w * x)
            grads[:, c, 0] = -a * w * np.sin(w * x)
        return vals, grads

    def frames(self, coords):
        return np.ones((len(coords), 1, 1))

    def embed(self, coords):
        return np.asarray(coords, float)

    def distance(self, a, b):
        return np.abs(np.asarray(a)[..., 0] - np.asarray(b)[..., 0])

    def ball_measure(self, coords, r):
        y = np.asarray(coords, float)[:, 0]
        return np.minimum(y + r, self.ell) - np.maximum(y - r, 0.0)

    def step(self, coords, j, h):
        return coords + h

    def tangent_delta(self, a, b):
        return (np.asarray(b)[..., 0] - np.asarray(a)[..., 0])[..., None]

    def fd_gradient(self, u):
        u = np.asarray(u, float)
        g = np.empty_like(u)
        h = self.h
        g[1:-1] = (u[2:] - u[:-2]) / (2 * h)
        g[0] = (-3 * u[0] + 4 * u[1] - u[2]) / (2 * h)
        g[-1] = (3 * u[-1] - 4 * u[-2] + u[-3]) / (2 * h)
        return g[..., None]


class _Torus:
    kind = "flat_torus"
    dim = 2

    def __init__(self, P, sides=(2 * np.pi, 2 * np.pi), shape=None):
        a, b = (float(s) for s in sides)
        if a <= 0 or b <= 0:
            raise ValueError("torus side lengths must be positive")
        if shape is None:
            n = int(round(math.sqrt(P)))
            if n * n != P:
                raise ValueError(f"flat_torus needs a square sample count or an explicit shape (got P={P})")
            shape = (n, n)
        nx, ny = (int(s) for s in shape)
        self.nx, self.ny, self.a, self.b = nx, ny, a, b
        self.P = nx * ny
        self.hx, self.hy = a / nx, b / ny
        self.h = max(self.hx, self.hy)
        x, y = np.meshgrid(np.arange(nx) * self.hx, np.arange(ny) * self.hy, indexing="ij")
        self.coords = np.column_stack([x.ravel(), y.ravel()])
        self.mass = np.full(self.P, a * b / self.P)
        self.diameter = 0.5 * math.hypot(a, b)
        self.params = {"sides": [a, b], "shape": [nx, ny]}
        self.cx = _Circle(nx, a / (2 * np.pi))
        self.cy = _Circle(ny, b / (2 * np.pi))

    def _pairs(self, mx, my):
        lx = [self.cx.eigenvalue(m) for m in mx]
        ly = [self.cy.eigenvalue(m) for m in my]
        pairs = [(lx[i] + ly[j], i, j) for i in range(len(mx)) for j in range(len(my))]
        pairs.sort()
        return [(mx[i], my[j]) for _, i, j in pairs]

    def modes(self, count):
        mx = self.cx.modes(self.nx - (1 - self.nx % 2))
        my = self.cy.modes(self.ny - (1 - self.ny % 2))
        pairs = self._pairs(mx, my)
        if count > len(pairs):
            raise ValueError(f"flat_torus grid resolves only {len(pairs)} modes")
        out = pairs[:count]
        # modes beyond the grid's Nyquist limit would be missing from the ordering
        limit = min((np.pi * self.nx / self.a) ** 2, (np.pi * self.ny / self.b) ** 2)
        if self.eigenvalue(out[-1]) >= limit:
            raise ValueError("flat_torus cutoff exceeds the grid's resolvable spectrum; increase P")
        return out

    def full_modes(self):
        return self._pairs(self.cx.full_modes(), self.cy.full_modes())

    def resolves(self, modes):
        return True

    def eigenvalue(self, mode):
        return self.cx.eigenvalue(mode[0]) + self.cy.eigenvalue(mode[1])

    def evaluate(self, coords, modes):
        c = np.asarray(coords, float)
        tx = (2 * np.pi / self.a) * c[:, :1]
        ty = (2 * np.pi / self.b) * c[:, 1:2]
        mx = sorted({m[0] for m in modes})
        my = sorted({m[1] for m in modes})
        vx, gx = self.cx.evaluate(tx, mx)
        vy, gy = self.cy.evaluate(ty, my)
        ix = {m: i for i, m in enumerate(mx)}
        iy = {m: i for i, m in enumerate(my)}
        i = np.array([ix[p] for p, _ in modes], dtype=np.int64)
        j = np.array([iy[q] for _, q in modes], dtype=np.int64)
        vals = vx[:, i] * vy[:, j]
        grads = np.stack([gx[:, i, 0] * vy[:, j], vx[:, i] * gy[:, j, 0]], axis=-1)
        return vals, grads

    def frames(self, coords):
        return np.broadcast_to(np.eye(2), (len(coords), 2, 2)).copy()

    def embed(self, coords):
        return np.asarray(coords, float)

    def distance(self, a, b):
        a, b = np.asarray(a), np.asarray(b)
        return np.hypot(_wrap(a[..., 0] - b[..., 0], self.a), _wrap(a[..., 1] - b[..., 1], self.b))

    def ball_measure(self, coords, r):
        if r <= 0.5 * min(self.a, self.b):
            return np.full(len(coords), np.pi * r * r)
        # self-overlapping disc: integrate the indicator on a fine grid
        n = 400
        g = (np.arange(n) + 0.5) / n
        x, y = np.meshgrid(g * self.a, g * self.b, indexing="ij")
        d = self.distance(np.zeros(2), np.stack([x, y], axis=-1))
        return np.full(len(coords), (d < r).mean() * self.a * self.b)

    def step(self, coords, j, h):
        out = np.array(coords, float)
        out[:, j] += h
        return out

    def tangent_delta(self, a, b):
        d = np.asarray(b, float) - np.asarray(a, float)
        d[..., 0] = (d[..., 0] + self.a / 2) % self.a - self.a / 2
        d[..., 1] = (d[..., 1] + self.b / 2) % self.b - self.b / 2
        return d

    def fd_gradient(self, u):
        u = np.asarray(u, float)
        tail = u.shape[1:]
        grid = u.reshape((self.nx, self.ny) + tail)
        gx = _centered_periodic(grid, self.hx, axis=0).reshape(u.shape)
        gy = _centered_periodic(grid, self.hy, axis=1).reshape(u.shape)
        return np.stack([gx, gy], axis=-1)


class _Sphere:
    kind = "round_sphere"
    dim = 2

    def __init__(self, P, max_degree=SPHERE_MAX_DEGREE):
        n = max(2, int(math.ceil(math.sqrt(P / 2))))
        self.n = n
        self.P = 2 * n * n
        self.cap = min(int(max_degree), SPHERE_MAX_DEGREE)
        x, w = roots_legendre(n)
        theta = np.arccos(x)
        phi = 2 * np.pi * np.arange(2 * n) / (2 * n)
        T, F = np.meshgrid(theta, phi, indexing="ij")
        self.theta, self.phi = T.ravel(), F.ravel()
        self.coords = np.column_stack(
            [np.sin(self.theta) * np.cos(self.phi), np.sin(self.theta) * np.sin(self.phi), np.cos(self.theta)]
        )
        self.mass = np.repeat(w, 2 * n) * (np.pi / n)
        self.h = np.pi / n
        self.diameter = np.pi
        self.params = {"max_degree": self.cap, "n_theta": n}

    def modes(self, count):
        out = []
        ell = 0
        while len(out) < count:
            if ell > self.cap:
                raise ValueError(f"round_sphere harmonics are tabulated only up to degree {self.cap}")
            out += [(ell, m) for m in range(-ell, ell + 1)]
            ell += 1
        return out[:count]

    def full_modes(self):
        deg = min(self.n - 1, self.cap)
        return [(ell, m) for ell in range(deg + 1) for m in range(-ell, ell + 1)]

    def resolves(self, modes):
        return all(ell <= self.n - 1 for ell, _ in modes)

    def eigenvalue(self, mode):
        return float(mode[0] * (mode[0] + 1))

    @staticmethod
    def _angles(coords):
        c = np.asarray(coords, float)
        c = c / np.linalg.norm(c, axis=1, keepdims=True)
        theta = np.arccos(np.clip(c[:, 2], -1.0, 1.0))
        # gradients are evaluated a hair away from the poles
        theta = np.clip(theta, 1e-7, np.pi - 1e-7)
        phi = np.arctan2(c[:, 1], c[:, 0]) % (2 * np.pi)
        return theta, phi

    def evaluate(self, coords, modes):
        theta, phi = self._angles(coords)
        sin_t = np.sin(theta)
        vals = np.empty((len(theta), len(modes)))
        grads = np.empty((len(theta), len(modes), 2))
        cache = {}
        for col, (ell, m) in enumerate(modes):
            am = abs(m)
            if (ell, am) not in cache:
                cache[ell, am] = sph_legendre_p(ell, am, theta, diff_n=1)
            p, dp = cache[ell, am]
            if m == 0:
                vals[:, col] = p
                grads[:, col, 0] = dp
                grads[:, col, 1] = 0.0
            elif m > 0:
                c, s = np.cos(m * phi), np.sin(m * phi)
                vals[:, col] = np.sqrt(2) * p * c
                grads[:, col, 0] = np.sqrt(2) * dp * c
                grads[:, col, 1] = -np.sqrt(2) * m * p * s / sin_t
            else:
                c, s = np.cos(am * phi), np.sin(am * phi)
                vals[:, col] = np.sqrt(2) * p * s
                grads[:, col, 0] = np.sqrt(2) * dp * s
                grads[:, col, 1] = np.sqrt(2) * am * p * c / sin_t
        return vals, grads

    def frames(self, coords):
        theta, phi = self._angles(coords)
        e_t = np.stack([np.cos(theta) * np.cos(phi), np.cos(theta) * np.sin(phi), -np.sin(theta)], axis=1)
        e_p = np.stack([-np.sin(phi), np.cos(phi), np.zeros_like(phi)], axis=1)
        return np.stack([e_t, e_p], axis=1)

    def embed(self, coords):
        return np.asarray(coords, float)

    def distance(self, a, b):
        chord = np.linalg.norm(np.asarray(a) - np.asarray(b), axis=-1)
        return 2 * np.arcsin(np.clip(chord / 2, 0.0, 1.0))

    def ball_measure(self, coords, r):
        return np.full(len(coords), 2 * np.pi * (1 - np.cos(min(r, np.pi))))

    def step(self, coords, j, h):
        e = self.frames(coords)[:, j]
        x = np.asarray(coords, float)
        return np.cos(h) * x + np.sin(h) * e

    def tangent_delta(self, a, b):
        d = np.asarray(b, float) - np.asarray(a, float)
        return np.einsum("nd,nad->na", d, self.frames(a))

    def fd_gradient(self, u):
        return None


_MODEL_CLASSES = {"circle": _Circle, "interval": _Interval, "flat_torus": _Torus, "round_sphere": _Sphere}


class ModelGeometry:
    """Closed-form geometry backing a model space."""

    is_mesh = False

    def __init__(self, model, modes):
        self.model = model
        self.modes = modes

    @property
    def kind(self):
        return self.model.kind

    @property
    def params(self):
        return self.model.params

    @property
    def spacing(self):
        return self.model.h

    def evaluate_eigen(self, coords, count=None):
        modes = self.modes if count is None else self.modes[:count]
        return self.model.evaluate(coords, modes)

    def point_distance(self, a, b):
        return self.model.distance(a, b)

    def distance_rows(self, coords, rows):
        return self.model.distance(coords[rows][:, None, :], coords[None, :, :])

    def ball_measure(self, points, r):
        return self.model.ball_measure(np.atleast_2d(points), r)

    @cached_property
    def operator_basis(self):
        """(eigenvalues, values, gradients) for every mode the grid resolves."""
        modes = self.model.full_modes()
        vals, grads = self.model.evaluate(self.model.coords, modes)
        lam = np.array([self.model.eigenvalue(m) for m in modes])
        # normalize numerically so the basis is exactly mass-orthonormal
        norms = np.sqrt(self.model.mass @ vals**2)
        return lam, vals / norms, grads / norms[None, :, None]

    def spectral_gradient(self, u):
        lam, vals, grads = self.operator_basis
        coef = vals.T @ (self.model.mass[:, None] * np.asarray(u, float).reshape(len(vals), -1))
        g = np.einsum("pkm,kc->pcm", grads, coef)
        return g.reshape(np.shape(u) + (grads.shape[2],))

    def grid_gradient(self, u):
        g = self.model.fd_gradient(u)
        return self.spectral_gradient(u) if g is None else g

    def laplacian(self, u):
        lam, vals, _ = self.operator_basis
        u = np.asarray(u, float)
        coef = vals.T @ (self.model.mass[:, None] * u.reshape(len(vals), -1))
        return (-vals @ (lam[:, None] * coef)).reshape(u.shape)

    @cached_property
    def stiffness(self):
        lam, vals, _ = self.operator_basis
        mv = self.model.mass[:, None] * vals
        return (mv * lam) @ mv.T

    def dirichlet_density(self, u):
        g = self.spectral_gradient(u)
        return (g**2).reshape(len(g), -1).sum(axis=1)

    def vector_gradient(self, u):
        return self.spectral_gradient(u)


class MeshGeometry:
    """Cotangent/lumped-mass geometry backing a mesh space."""

    is_mesh = True
    kind = "mesh"
    _DENSE_DISTANCE_LIMIT = 6000

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.params = {}

    @property
    def spacing(self):
        return self.mesh.mean_edge_length

    @cached_property
    def _all_distances(self):
        return self.mesh.geodesic_distances(np.arange(self.mesh.n_vertices))

    def distance_rows(self, coords, rows):
        rows = np.atleast_1d(rows)
        if self.mesh.n_vertices <= self._DENSE_DISTANCE_LIMIT:
            return self._all_distances[rows]
        return self.mesh.geodesic_distances(rows)

    def point_distance(self, a, b):
        a, b = np.broadcast_arrays(np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64))
        ua, inv = np.unique(a, return_inverse=True)
        rows = self.distance_rows(None, ua)
        return rows[inv.reshape(a.shape), b]

    @property
    def stiffness(self):
        return self.mesh.stiffness

    def laplacian(self, u):
        return -(self.mesh.stiffness @ np.asarray(u, float)) / self.mesh.vertex_mass.reshape(
            (-1,) + (1,) * (np.ndim(u) - 1)
        )

    def grid_gradient(self, u):
        return self.mesh.vertex_gradients(u)

    vector_gradient = grid_gradient
    spectral_gradient = grid_gradient

    def dirichlet_density(self, u):
        return self.mesh.dirichlet_density(u)


class BallQuery(NamedTuple):
    ids: np.ndarray
    masses: np.ndarray
    measure: float


@dataclass(frozen=True, eq=False)
class SpectralSpace:
    """A sampled metric-measure space with its low spectrum.

    ``eigengradients[p, i]`` is the gradient of eigenfunction ``i`` at sample
    ``p`` in the orthonormal frame ``frames[p]`` (rows are tangent vectors in
    the coordinates of :meth:`embedded_points`).  The Riemannian metric is the
    identity in every frame.
    """

    name: str
    intrinsic_dim: int
    coords: np.ndarray
    mass: np.ndarray
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    eigengradients: np.ndarray
    frames: np.ndarray
    diameter_bound: float
    geometry: ModelGeometry | MeshGeometry
    last_cluster_complete: bool = True

    @property
    def n_samples(self) -> int:
        return len(self.mass)

    @property
    def cutoff(self) -> int:
        """Index L of the highest stored eigenpair."""
        return len(self.eigenvalues) - 1

    @property
    def total_measure(self) -> float:
        return float(self.mass.sum())

    @property
    def spacing(self) -> float:
        return float(self.geometry.spacing)

    @property
    def is_mesh(self) -> bool:
        return self.geometry.is_mesh

    @cached_property
    def clusters(self) -> list[np.ndarray]:
        return group_eigenvalues(self.eigenvalues)

    def complete_cutoff(self, l: int | None = None) -> int:
        """Largest index <= l (default L) that closes a complete eigenspace."""
        l = self.cutoff if l is None else int(l)
        best = 0
        for i, c in enumerate(self.clusters):
            last = int(c[-1])
            if last > l:
                break
            if i == len(self.clusters) - 1 and not self.last_cluster_complete:
                break
            best = last
        return best

    def cluster_of(self, lam: float) -> np.ndarray:
        """Index cluster whose eigenvalues match ``lam`` within grouping tolerance."""
        tol = max(1e-8, 1e-6 * abs(lam))
        for c in self.clusters:
            if np.min(np.abs(self.eigenvalues[c] - lam)) <= tol:
                return c
        raise ValueError(f"{lam!r} is not an eigenvalue of {self.name} (within grouping tolerance)")

    def embedded_points(self) -> np.ndarray:
        if self.is_mesh:
            return self.geometry.mesh.vertices
        return self.geometry.model.embed(self.coords)

    def distances_from(self, p: int) -> np.ndarray:
        return self.geometry.distance_rows(self.coords, np.array([p]))[0]

    def distance_rows(self, rows) -> np.ndarray:
        return self.geometry.distance_rows(self.coords, np.atleast_1d(rows))

    def distance(self, p: int, q) -> np.ndarray | float:
        row = self.distances_from(p)
        return row[q]

    def gradient(self, u) -> np.ndarray:
        """Discrete gradient of sampled values in the sample frames."""
        return self.geometry.grid_gradient(u)


def _validate_orthonormality(space: SpectralSpace, tol=TOL_ORTH):
    phi = space.eigenfunctions
    gram = phi.T @ (space.mass[:, None] * phi)
    err = np.abs(gram - np.eye(len(gram))).max()
    if err > tol:
        raise SpectrumError(f"discrete orthonormality residual {err:.3e} exceeds {tol:.1e}")
    return err


def build_model_space(kind: str, params: dict | None = None, P: int = 256, L: int = 40) -> SpectralSpace:
    """Model space with closed-form spectrum sampled on ``P`` points.

    ``kind`` is one of ``circle`` (``radius``), ``interval`` (``length``,
    Neumann), ``flat_torus`` (``sides``, optional ``shape``) or
    ``round_sphere`` (unit radius, ``max_degree`` <= 40).  The torus uses a
    square ``sqrt(P) x sqrt(P)`` grid unless ``shape`` is given and the sphere
    rounds ``P`` up to ``2 n^2`` Gauss-Legendre x uniform samples.
    """
    params = dict(params or {})
    if kind not in _MODEL_CLASSES:
        raise ValueError(f"unsupported model space kind {kind!r}; expected one of {MODEL_KINDS}")
    if P < 16:
        raise ValueError("model spaces need at least 16 samples")
    if L < 1:
        raise ValueError("spectral cutoff L must be >= 1")
    model = _MODEL_CLASSES[kind](P, **params)
    modes = model.modes(L + 1)
    if not model.resolves(modes):
        raise ValueError(f"{kind}: cutoff L={L} is not resolved by {model.P} samples; increase P")
    vals, grads = model.evaluate(model.coords, modes)
    lam = np.array([model.eigenvalue(m) for m in modes])
    try:
        nxt = model.eigenvalue(model.modes(L + 2)[-1])
        complete = nxt - lam[-1] > max(1e-8, 1e-6 * nxt)
    except ValueError:
        complete = True
    space = SpectralSpace(
        name=kind,
        intrinsic_dim=model.dim,
        coords=model.coords,
        mass=model.mass,
        eigenvalues=lam,
        eigenfunctions=vals,
        eigengradients=grads,
        frames=model.frames(model.coords),
        diameter_bound=float(model.diameter),
        geometry=ModelGeometry(model, modes),
        last_cluster_complete=bool(complete),
    )
    _validate_orthonormality(space, tol=1e-10)
    return space


def solve_spectrum(stiffness, mass, k: int, tol: float = TOL_EIG, dense_limit: int = 1500):
    """Lowest ``k`` eigenpairs of ``S v = lam M v`` with diagonal ``M``.

    Returns ``(eigenvalues, eigenvectors)`` sorted ascending with
    M-orthonormal columns.  Raises :class:`SpectrumError` on asymmetry beyond
    tolerance, non-convergence or a residual check failure.
    """
    m = np.asarray(mass.diagonal() if sparse.issparse(mass) else mass, dtype=float)
    if m.ndim == 2:
        m = np.diag(m)
    n = len(m)
    if np.any(m <= 0):
        raise ValueError("mass entries must be positive")
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    is_sparse = sparse.issparse(stiffness)
    S = stiffness.tocsr() if is_sparse else np.asarray(stiffness, float)
    asym = abs(S - S.T).max() if is_sparse else np.abs(S - S.T).max()
    scale = abs(S).max() if is_sparse else np.abs(S).max()
    if asym > 1e-10 * max(scale, 1.0):
        raise ValueError(f"stiffness is not symmetric (max asymmetry {asym:.3e})")

    if n <= dense_limit or k > n // 3:
        Sd = S.toarray() if is_sparse else S
        lam, vec = scipy.linalg.eigh(Sd, np.diag(m), subset_by_index=[0, k - 1])
        diag = {"method": "dense"}
    else:
        sigma = -1e-3 * float(np.median(np.abs(S.diagonal()) / m))
        try:
            lam, vec = splinalg.eigsh(
                S.tocsc(), k=k, M=sparse.diags(m).tocsc(), sigma=sigma, which="LM", maxiter=20 * n
            )
        except splinalg.ArpackNoConvergence as exc:
            raise SpectrumError(
                "eigensolver did not converge",
                {"method": "arpack-shift-invert", "converged": len(exc.eigenvalues), "requested": k},
            ) from exc
        diag = {"method": "arpack-shift-invert", "sigma": sigma}
    order = np.argsort(lam, kind="stable")
    lam, vec = lam[order], vec[:, order]
    vec = vec / np.sqrt(np.einsum("ij,i,ij->j", vec, m, vec))
    # deterministic sign: largest-magnitude entry positive
    piv = np.argmax(np.abs(vec), axis=0)
    vec = vec * np.sign(vec[piv, np.arange(vec.shape[1])])

    Sv = S @ vec
    snorm = float(abs(S).sum(axis=0).max()) if is_sparse else float(np.abs(S).sum(axis=0).max())
    res = np.linalg.norm(Sv - m[:, None] * vec * lam, axis=0)
    bound = tol * (snorm + np.abs(lam) * m.max()) * np.linalg.norm(vec, axis=0)
    if np.any(res > bound):
        i = int(np.argmax(res / bound))
        diag.update(worst_index=i, residual=float(res[i]), bound=float(bound[i]))
        raise SpectrumError("eigenpair residual check failed", diag)
    gram = vec.T @ (m[:, None] * vec)
    orth = np.abs(gram - np.eye(k)).max()
    if orth > TOL_ORTH:
        # clustered eigenvectors from ARPACK may need re-orthonormalization
        chol = np.linalg.cholesky(gram)
        vec = np.linalg.solve(chol, vec.T).T
    return lam, vec


def build_from_mesh(mesh: Mesh, L: int, name: str = "mesh") -> SpectralSpace:
    """Cotangent-Laplacian spectral space of a triangle mesh (lowest L+1 pairs)."""
    n = mesh.n_vertices
    if L >= n - 1:
        raise ValueError(f"L={L} must be smaller than the vertex count minus one ({n - 1})")
    lam, vec = solve_spectrum(mesh.stiffness, mesh.vertex_mass, L + 2)
    lam[0] = max(lam[0], 0.0) if abs(lam[0]) < 1e-8 else lam[0]
    clusters = group_eigenvalues(lam)
    complete = len(clusters[-1]) == 1  # the extra pair starts its own cluster
    lam, vec = lam[: L + 1], vec[:, : L + 1]
    # constant eigenfunction with a fixed sign
    vec[:, 0] = np.sign(vec[:, 0].sum()) * vec[:, 0]
    grads = mesh.vertex_gradients(vec)
    geometry = MeshGeometry(mesh)
    ecc = float(mesh.geodesic_distances(0).max())
    return SpectralSpace(
        name=name,
        intrinsic_dim=2,
        coords=mesh.vertices,
        mass=mesh.vertex_mass,
        eigenvalues=lam,
        eigenfunctions=vec,
        eigengradients=grads,
        frames=mesh.vertex_frames,
        diameter_bound=2 * ecc,
        geometry=geometry,
        last_cluster_complete=complete,
    )


def ball_query(space: SpectralSpace, p: int, r: float) -> BallQuery:
    """Samples strictly within distance ``r`` of sample ``p``."""
    if r <= 0:
        raise ValueError("ball radius must be positive")
    d = space.distances_from(p)
    ids = np.flatnonzero(d < r)
    masses = space.mass[ids]
    return BallQuery(ids, masses, float(masses.sum()))


def _tree_points(model):
    """KD-tree coordinates, periodic box and a chord-radius map for a model space."""
    if model.kind == "circle":
        return model.R * model.coords, model.length, lambda r: r
    if model.kind == "interval":
        return model.coords, None, lambda r: r
    if model.kind == "flat_torus":
        return model.coords, np.array([model.a, model.b]), lambda r: r
    return model.coords, None, lambda r: 2 * math.sin(min(r, math.pi) / 2)


def iter_ball_pairs(space: SpectralSpace, r: float, block: int = 2048):
    """Yield ``(p, q, d)`` arrays for all pairs with ``d(x_p, x_q) < r``, a block of ``p`` at a time.

    Self pairs are included and each block is sorted by ``p``.  Model spaces
    use a KD-tree on flat or chordal coordinates and recompute exact geodesic
    distances; meshes run distance-limited Dijkstra.
    """
    if r <= 0:
        raise ValueError("ball radius must be positive")
    n = space.n_samples
    if space.is_mesh:
        adj = space.geometry.mesh.adjacency
        for start in range(0, n, block):
            src = np.arange(start, min(start + block, n))
            d = csgraph.dijkstra(adj, directed=False, indices=src, limit=r)
            i, j = np.nonzero(d < r)
            yield src[i], j, d[i, j]
        return
    model = space.geometry.model
    pts, box, chord = _tree_points(model)
    tree = cKDTree(pts, boxsize=box)
    radius = chord(r) * (1 + 1e-9) + 1e-12
    for start in range(0, n, block):
        lists = tree.query_ball_point(pts[start : start + block], radius)
        counts = np.fromiter((len(x) for x in lists), dtype=np.int64, count=len(lists))
        rows = np.repeat(np.arange(start, start + len(lists)), counts)
        cols = np.concatenate([np.sort(x) for x in lists]).astype(np.int64)
        dist = np.asarray(model.distance(space.coords[rows], space.coords[cols]), float)
        keep = dist < r
        yield rows[keep], cols[keep], dist[keep]


def ball_pairs(space: SpectralSpace, r: float):
    """All pairs ``(p, q, d)`` with ``d < r`` concatenated from :func:`iter_ball_pairs`."""
    parts = list(iter_ball_pairs(space, r))
    return tuple(np.concatenate([part[k] for part in parts]) for k in range(3))


def ball_sums(space: SpectralSpace, r: float, values=None, pair_values=None):
    """Per-sample sums over B_r(x_p) of ``mu_q`` times a weight.

    The weight is ``values[q]`` or ``pair_values(p, q, d)`` (at most one of
    them); without either it is 1, which gives mu(B_r(x_p)).
    """
    out = np.zeros(space.n_samples)
    for rows, cols, dist in iter_ball_pairs(space, r):
        w = space.mass[cols]
        if values is not None:
            w = w * np.asarray(values)[cols]
        elif pair_values is not None:
            w = w * pair_values(rows, cols, dist)
        out += np.bincount(rows, weights=w, minlength=space.n_samples)
    return out


def ball_measures(space: SpectralSpace, r: float) -> np.ndarray:
    """mu(B_r(x_p)) for every sample."""
    return ball_sums(space, r)


# --------------------------------------------------------------------------
# JSON caching
# --------------------------------------------------------------------------


def space_to_dict(space: SpectralSpace) -> dict:
    geo = space.geometry
    if geo.is_mesh:
        mesh = geo.mesh
        source = {
            "type": "mesh",
            "vertices": mesh.vertices.ravel().tolist(),
            "triangles": mesh.triangles.ravel().tolist(),
            "periods": list(mesh.periods) if mesh.periods else None,
        }
    else:
        source = {"type": "model", "kind": geo.kind, "params": geo.params, "P": space.n_samples}
    return {
        "schema_version": SCHEMA_VERSION,
        "name": space.name,
        "dim": space.intrinsic_dim,
        "n_samples": space.n_samples,
        "cutoff": space.cutoff,
        "masses": space.mass.tolist(),
        "eigenvalues": space.eigenvalues.tolist(),
        "eigenfunctions": space.eigenfunctions.ravel().tolist(),
        "gradients": space.eigengradients.ravel().tolist(),
        "frame": space.frames.ravel().tolist(),
        "frame_shape": list(space.frames.shape),
        "coords": space.coords.ravel().tolist(),
        "coords_shape": list(space.coords.shape),
        "diameter_bound": space.diameter_bound,
        "last_cluster_complete": space.last_cluster_complete,
        "source": source,
    }


def space_from_dict(doc: dict) -> SpectralSpace:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {doc.get('schema_version')!r}")
    P, L, m = doc["n_samples"], doc["cutoff"], doc["dim"]
    src = doc["source"]
    if src["type"] == "mesh":
        mesh = Mesh(
            np.reshape(src["vertices"], (-1, 3)),
            np.reshape(src["triangles"], (-1, 3)),
            periods=tuple(src["periods"]) if src.get("periods") else None,
        )
        geometry = MeshGeometry(mesh)
    else:
        params = dict(src["params"])
        if src["kind"] == "round_sphere":
            params.pop("n_theta", None)
        model = _MODEL_CLASSES[src["kind"]](src["P"], **params)
        geometry = ModelGeometry(model, model.modes(L + 1))
    return SpectralSpace(
        name=doc["name"],
        intrinsic_dim=m,
        coords=np.reshape(doc["coords"], doc["coords_shape"]),
        mass=np.asarray(doc["masses"], float),
        eigenvalues=np.asarray(doc["eigenvalues"], float),
        eigenfunctions=np.reshape(doc["eigenfunctions"], (P, L + 1)),
        eigengradients=np.reshape(doc["gradients"], (P, L + 1, m)),
        frames=np.reshape(doc["frame"], doc["frame_shape"]),
        diameter_bound=float(doc["diameter_bound"]),
        geometry=geometry,
        last_cluster_complete=bool(doc.get("last_cluster_complete", True)),
    )


def save_space(space: SpectralSpace, path) -> None:
    with open(path, "w") as fh:
        json.dump(space_to_dict(space), fh)


def load_space(path) -> SpectralSpace:
    with open(path) as fh:
        return space_from_dict(json.load(fh))
