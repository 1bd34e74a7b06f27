"""Triangle meshes: validation, cotangent operators, generators and file IO.

Meshes may be *periodic*: when ``periods=(a, b)`` is given, every edge vector
is reduced to its minimum image in the x/y plane, which is how flat tori are
represented without an isometric embedding in R^3.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

logger = logging.getLogger(__name__)

AREA_THRESHOLD = 1e-14


class MeshError(ValueError):
    """Raised for invalid mesh input."""


@dataclass(frozen=True, eq=False)
class Mesh:
    """A triangle mesh.

    Parameters
    ----------
    vertices : (n, 3) array
    triangles : (f, 3) int array
    periods : optional (a, b) periodicity in x and y
    boundary : optional per-vertex boundary flag (informational only)
    """

    vertices: np.ndarray
    triangles: np.ndarray
    periods: tuple[float, float] | None = None
    boundary: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] not in (2, 3):
            raise MeshError("vertices must be an (n, 3) array")
        if v.shape[1] == 2:
            v = np.column_stack([v, np.zeros(len(v))])
        t = np.asarray(self.triangles, dtype=np.int64)
        if t.ndim != 2 or t.shape[1] != 3 or len(t) == 0:
            raise MeshError("triangles must be a non-empty (f, 3) int array")
        if t.min() < 0 or t.max() >= len(v):
            raise MeshError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        if self.periods is not None:
            object.__setattr__(self, "periods", tuple(float(p) for p in self.periods))

        areas = self.face_areas
        bad = np.flatnonzero(areas <= AREA_THRESHOLD * max(self.mean_edge_length, 1.0) ** 2)
        if bad.size:
            raise MeshError(f"degenerate triangle(s) {bad[:5].tolist()} with area below threshold")
        n_comp, _ = csgraph.connected_components(self.adjacency, directed=False)
        if n_comp != 1:
            raise MeshError(f"edge graph is not connected ({n_comp} components)")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def edge_vectors(self, i, j):
        """Vector from vertex i to vertex j, minimum image for periodic meshes."""
        d = self.vertices[j] - self.vertices[i]
        if self.periods is not None:
            for axis, period in enumerate(self.periods):
                d[..., axis] -= period * np.round(d[..., axis] / period)
        return d

    @cached_property
    def _corners(self):
        # local positions of the three corners with corner 0 at the origin
        t = self.triangles
        e1 = self.edge_vectors(t[:, 0], t[:, 1])
        e2 = self.edge_vectors(t[:, 0], t[:, 2])
        return np.stack([np.zeros_like(e1), e1, e2], axis=1)

    @cached_property
    def face_normals_raw(self) -> np.ndarray:
        c = self._corners
        return np.cross(c[:, 1], c[:, 2])

    @cached_property
    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals_raw, axis=1)

    @cached_property
    def face_normals(self) -> np.ndarray:
        n = self.face_normals_raw
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    @cached_property
    def edges(self) -> np.ndarray:
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        e = self.edges
        return np.linalg.norm(self.edge_vectors(e[:, 0], e[:, 1]), axis=1)

    @property
    def mean_edge_length(self) -> float:
        return float(self.edge_lengths.mean())

    @cached_property
    def adjacency(self) -> sparse.csr_matrix:
        """Symmetric sparse matrix of Euclidean edge lengths."""
        e = self.edges
        n = self.n_vertices
        w = self.edge_lengths
        a = sparse.coo_matrix((w, (e[:, 0], e[:, 1])), shape=(n, n))
        return (a + a.T).tocsr()

    @cached_property
    def cotangents(self) -> np.ndarray:
        """(f, 3) cotangent of the interior angle at each corner."""
        c = self._corners
        cots = np.empty((len(c), 3))
        for i in range(3):
            a = c[:, (i + 1) % 3] - c[:, i]
            b = c[:, (i + 2) % 3] - c[:, i]
            cots[:, i] = np.einsum("ij,ij->i", a, b) / np.linalg.norm(np.cross(a, b), axis=1)
        return cots

    @cached_property
    def stiffness(self) -> sparse.csr_matrix:
        """Cotangent stiffness matrix, positive semidefinite."""
        t = self.triangles
        cot = self.cotangents
        n = self.n_vertices
        rows, cols, vals = [], [], []
        for i in range(3):
            j, k = (i + 1) % 3, (i + 2) % 3
            # the angle at corner i is opposite to edge (j, k)
            w = 0.5 * cot[:, i]
            rows += [t[:, j], t[:, k]]
            cols += [t[:, k], t[:, j]]
            vals += [-w, -w]
        off = sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        ).tocsr()
        diag = -np.asarray(off.sum(axis=1)).ravel()
        return (off + sparse.diags(diag)).tocsr()

    @cached_property
    def corner_areas(self) -> np.ndarray:
        """(f, 3) mixed Voronoi area of each face assigned to its corners.

        Rows sum to the face area.
        """
        c = self._corners
        cot = self.cotangents
        area = self.face_areas
        out = np.empty((len(c), 3))
        sq = np.empty((len(c), 3))
        for i in range(3):
            # squared length of the edge opposite corner i
            d = c[:, (i + 2) % 3] - c[:, (i + 1) % 3]
            sq[:, i] = np.einsum("ij,ij->i", d, d)
        for i in range(3):
            j, k = (i + 1) % 3, (i + 2) % 3
            out[:, i] = (sq[:, k] * cot[:, k] + sq[:, j] * cot[:, j]) / 8.0
        obtuse = (cot < 0).any(axis=1)
        if obtuse.any():
            ob = cot[obtuse] < 0
            out[obtuse] = np.where(ob, 0.5, 0.25) * area[obtuse, None]
        return out

    @cached_property
    def vertex_mass(self) -> np.ndarray:
        """Lumped (mixed Voronoi) vertex areas; they sum to the total area."""
        return np.bincount(
            self.triangles.ravel(), weights=self.corner_areas.ravel(), minlength=self.n_vertices
        )

    @cached_property
    def hat_gradients(self) -> np.ndarray:
        """(f, 3, 3) ambient gradient of each corner's hat function on each face."""
        c = self._corners
        n = self.face_normals
        a2 = 2.0 * self.face_areas
        g = np.empty_like(c)
        for i in range(3):
            opp = c[:, (i + 2) % 3] - c[:, (i + 1) % 3]
            g[:, i] = np.cross(n, opp) / a2[:, None]
        return g

    def face_gradients(self, u: np.ndarray) -> np.ndarray:
        """Per-face gradient of the piecewise-linear interpolant of ``u``.

        ``u`` has shape (n,) or (n, k); result is (f, 3) or (f, k, 3).
        """
        vals = np.asarray(u)[self.triangles]  # (f, 3[, k])
        if vals.ndim == 2:
            return np.einsum("fi,fid->fd", vals, self.hat_gradients)
        return np.einsum("fik,fid->fkd", vals, self.hat_gradients)

    @cached_property
    def vertex_normals(self) -> np.ndarray:
        n = np.zeros((self.n_vertices, 3))
        for i in range(3):
            np.add.at(n, self.triangles[:, i], self.face_normals_raw)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    @cached_property
    def vertex_frames(self) -> np.ndarray:
        """(n, 2, 3) orthonormal tangent frame orthogonal to the vertex normal."""
        n = self.vertex_normals
        seed = np.tile([1.0, 0.0, 0.0], (len(n), 1))
        seed[np.abs(n[:, 0]) > 0.9] = [0.0, 1.0, 0.0]
        t1 = seed - np.einsum("ij,ij->i", seed, n)[:, None] * n
        t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
        t2 = np.cross(n, t1)
        return np.stack([t1, t2], axis=1)

    @cached_property
    def _face_to_vertex(self) -> sparse.csr_matrix:
        # area-weighted averaging of face quantities onto vertices
        t = self.triangles
        f = len(t)
        w = np.repeat(self.face_areas, 3)
        a = sparse.coo_matrix((w, (t.ravel(), np.repeat(np.arange(f), 3))), shape=(self.n_vertices, f))
        a = a.tocsr()
        s = np.asarray(a.sum(axis=1)).ravel()
        return sparse.diags(1.0 / s) @ a

    def vertex_gradients(self, u: np.ndarray) -> np.ndarray:
        """Area-averaged face gradients expressed in the vertex frames.

        ``u`` of shape (n,) gives (n, 2); shape (n, k) gives (n, k, 2).
        """
        g = self.face_gradients(u)
        frames = self.vertex_frames
        if g.ndim == 2:
            gv = self._face_to_vertex @ g
            return np.einsum("nd,nad->na", gv, frames)
        f, k, _ = g.shape
        gv = (self._face_to_vertex @ g.reshape(f, k * 3)).reshape(-1, k, 3)
        return np.einsum("nkd,nad->nka", gv, frames)

    def dirichlet_density(self, u: np.ndarray) -> np.ndarray:
        """Per-vertex density whose mass-weighted sum equals ``sum_i u_i^T S u_i``.

        Face energies |grad_T u|^2 are distributed to corners by mixed areas.
        """
        g = self.face_gradients(u)
        fe = (g**2).sum(axis=tuple(range(1, g.ndim)))
        contrib = self.corner_areas * fe[:, None]
        tot = np.bincount(self.triangles.ravel(), weights=contrib.ravel(), minlength=self.n_vertices)
        return tot / self.vertex_mass

    def geodesic_distances(self, sources) -> np.ndarray:
        """Edge-graph shortest path distances from ``sources`` to all vertices."""
        return csgraph.dijkstra(self.adjacency, directed=False, indices=sources)


def icosphere(level: int = 3, relaxed: bool = False) -> Mesh:
    """Unit icosphere obtained by ``level`` rounds of 4-to-1 subdivision.

    Midpoint subdivision leaves kinks along the edges of the base icosahedron,
    which limit the pointwise accuracy of the cotangent Laplacian.  With
    ``relaxed=True`` the vertices are moved by :func:`relax_on_sphere`, keeping
    the connectivity.
    """
    phi = (1.0 + 5**0.5) / 2.0
    v = [
        (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
        (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
        (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
    ]
    f = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.asarray(p, float) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(level):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    mesh = Mesh(np.array(verts), np.array(faces))
    return relax_on_sphere(mesh) if relaxed else mesh


def relax_on_sphere(mesh: Mesh, tol: float = 1e-13, max_iter: int = 10000) -> Mesh:
    """Centroidal relaxation of a unit-sphere mesh.

    Each vertex moves to the normalized area-weighted mean of the projected
    centroids of its incident faces, until no coordinate moves by more than
    ``tol``.
    """
    x = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1)[:, None]
    T = mesh.triangles
    n = len(x)
    idx = T.ravel()
    for _ in range(max_iter):
        a, b, c = x[T[:, 0]], x[T[:, 1]], x[T[:, 2]]
        cen = a + b + c
        cen /= np.linalg.norm(cen, axis=1)[:, None]
        area = np.repeat(0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1), 3)
        pts = np.repeat(cen, 3, axis=0)
        acc = np.column_stack([np.bincount(idx, weights=area * pts[:, k], minlength=n) for k in range(3)])
        y = acc / np.linalg.norm(acc, axis=1)[:, None]
        moved = np.abs(y - x).max()
        x = y
        if moved < tol:
            break
    else:
        raise MeshError(f"sphere relaxation did not settle within {max_iter} iterations")
    return Mesh(x, T)


def torus_grid(n: int = 32, m: int | None = None, a: float = 2 * np.pi, b: float = 2 * np.pi) -> Mesh:
    """Flat periodic n x m grid on [0, a) x [0, b), two triangles per cell."""
    m = n if m is None else m
    x, y = np.meshgrid(np.arange(n) * a / n, np.arange(m) * b / m, indexing="ij")
    verts = np.column_stack([x.ravel(), y.ravel(), np.zeros(n * m)])
    idx = lambda i, j: (i % n) * m + (j % m)  # noqa: E731
    tris = []
    for i in range(n):
        for j in range(m):
            tris.append((idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)))
            tris.append((idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)))
    return Mesh(verts, np.array(tris), periods=(a, b))


def read_off(path) -> Mesh:
    tokens = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            tokens.extend(line.split())
    if not tokens or not tokens[0].upper().endswith("OFF"):
        raise MeshError(f"{path}: missing OFF header")
    pos = 1
    nv, nf = int(tokens[pos]), int(tokens[pos + 1])
    pos += 3
    verts = np.array(tokens[pos : pos + 3 * nv], dtype=float).reshape(nv, 3)
    pos += 3 * nv
    faces = []
    for _ in range(nf):
        k = int(tokens[pos])
        if k != 3:
            raise MeshError(f"{path}: only triangular faces are supported (got {k}-gon)")
        faces.append([int(x) for x in tokens[pos + 1 : pos + 4]])
        pos += 1 + k
    return Mesh(verts, np.array(faces))


def read_obj(path) -> Mesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            if len(idx) != 3:
                raise MeshError(f"{path}: only triangular faces are supported")
            faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
    return Mesh(np.array(verts), np.array(faces))


def write_off(mesh: Mesh, path) -> None:
    lines = ["OFF", f"{mesh.n_vertices} {len(mesh.triangles)} 0"]
    lines += [" ".join(repr(float(x)) for x in v) for v in mesh.vertices]
    lines += ["3 " + " ".join(str(int(i)) for i in t) for t in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def write_obj(mesh: Mesh, path) -> None:
    lines = ["v " + " ".join(repr(float(x)) for x in v) for v in mesh.vertices]
    lines += ["f " + " ".join(str(int(i) + 1) for i in t) for t in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh(path) -> Mesh:
    suffix = Path(path).suffix.lower()
    if suffix == ".off":
        return read_off(path)
    if suffix == ".obj":
        return read_obj(path)
    raise MeshError(f"unsupported mesh format {suffix!r} (OFF and OBJ only)")
