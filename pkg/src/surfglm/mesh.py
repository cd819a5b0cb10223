"""Triangular surface meshes and their linear finite-element matrices."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components, dijkstra
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

FWHM_TO_SD = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))


class MeshError(ValueError):
    """Malformed or invalid mesh input."""


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray  # (n, 3) mm
    triangles: np.ndarray  # (m, 3) int

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=float)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        validate_mesh(self)

    @property
    def n(self) -> int:
        return self.vertices.shape[0]

    @cached_property
    def triangle_areas(self) -> np.ndarray:
        p0, p1, p2 = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(p1 - p0, p2 - p0), axis=1)

    @cached_property
    def edges(self) -> np.ndarray:
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def edge_graph(self) -> sp.csr_matrix:
        """Symmetric adjacency weighted by Euclidean edge length."""
        e = self.edges
        w = np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)
        g = sp.coo_matrix((w, (e[:, 0], e[:, 1])), shape=(self.n, self.n))
        return (g + g.T).tocsr()

    @property
    def total_area(self) -> float:
        return float(self.triangle_areas.sum())


def validate_mesh(mesh: Mesh) -> None:
    v, t = mesh.vertices, mesh.triangles
    if v.ndim != 2 or v.shape[1] != 3:
        raise MeshError("vertices must be an (n, 3) array")
    if t.ndim != 2 or t.shape[1] != 3 or len(t) == 0:
        raise MeshError("triangles must be a non-empty (m, 3) integer array")
    if not np.all(np.isfinite(v)):
        raise MeshError("non-finite vertex coordinates")
    if t.min() < 0 or t.max() >= len(v):
        raise MeshError(f"triangle index out of range for {len(v)} vertices")
    p0, p1, p2 = (v[t[:, i]] for i in range(3))
    area2 = np.linalg.norm(np.cross(p1 - p0, p2 - p0), axis=1)
    scale = max(np.ptp(v, axis=0).max(), 1.0)
    bad = np.flatnonzero(area2 <= 1e-14 * scale**2)
    if len(bad):
        raise MeshError(f"degenerate (zero-area) triangle(s) at index {bad[:5].tolist()}")
    used = np.zeros(len(v), bool)
    used[t.ravel()] = True
    if not used.all():
        raise MeshError(f"{np.count_nonzero(~used)} vertices belong to no triangle")
    ncomp, _ = connected_components(_adjacency_pattern(t, len(v)), directed=False)
    if ncomp > 1:
        log.warning("mesh has %d connected components", ncomp)


def _adjacency_pattern(t, n):
    rows = np.concatenate([t[:, 0], t[:, 1], t[:, 2]])
    cols = np.concatenate([t[:, 1], t[:, 2], t[:, 0]])
    return sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr()


# -- text format ------------------------------------------------------------

def load_mesh(path) -> Mesh:
    """Read the ``mesh <nv> <nt>`` / ``v x y z`` / ``f i j k`` text format."""
    path = Path(path)
    with open(path) as fh:
        lines = [ln.split() for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines or lines[0][0] != "mesh" or len(lines[0]) != 3:
        raise MeshError(f"{path}: missing 'mesh <n_vertices> <n_triangles>' header")
    try:
        nv, nt = int(lines[0][1]), int(lines[0][2])
        verts = [[float(x) for x in ln[1:]] for ln in lines[1:] if ln[0] == "v"]
        tris = [[int(x) for x in ln[1:]] for ln in lines[1:] if ln[0] == "f"]
    except ValueError as exc:
        raise MeshError(f"{path}: {exc}") from exc
    other = [ln[0] for ln in lines[1:] if ln[0] not in ("v", "f")]
    if other:
        raise MeshError(f"{path}: unknown record type {other[0]!r}")
    if any(len(x) != 3 for x in verts) or any(len(x) != 3 for x in tris):
        raise MeshError(f"{path}: records must have exactly three fields")
    if len(verts) != nv or len(tris) != nt:
        raise MeshError(f"{path}: header says {nv}/{nt} but found {len(verts)}/{len(tris)}")
    return Mesh(np.array(verts, float), np.array(tris, np.int64))


def save_mesh(mesh: Mesh, path) -> None:
    with open(Path(path), "w") as fh:
        fh.write(f"mesh {mesh.n} {len(mesh.triangles)}\n")
        for x, y, z in mesh.vertices.tolist():
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for i, j, k in mesh.triangles.tolist():
            fh.write(f"f {i} {j} {k}\n")


# -- finite elements ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FemMatrices:
    C: sp.dia_matrix  # lumped mass, mm^2
    G: sp.csc_matrix  # stiffness
    GCinvG: sp.csc_matrix

    @property
    def n(self) -> int:
        return self.C.shape[0]

    @cached_property
    def c_diag(self) -> np.ndarray:
        return self.C.diagonal()


def build_fem_matrices(mesh: Mesh) -> FemMatrices:
    """Lumped mass ``C`` and P1 stiffness ``G`` for a surface mesh.

    ``C_ii`` is a third of the area of the triangles touching vertex ``i``;
    ``G_ij = (e_i . e_j) / (4 A)`` per triangle with ``e_i`` the edge
    opposite local vertex ``i``.
    """
    v, t = mesh.vertices, mesh.triangles
    area = mesh.triangle_areas
    if np.any(area <= 0):
        raise MeshError("degenerate triangle in FEM assembly")
    n = mesh.n
    c = np.bincount(t.ravel(), weights=np.repeat(area / 3.0, 3), minlength=n)

    # opposite-edge vectors, e[:, i] = p[i+2] - p[i+1]
    p = v[t]
    e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    local = np.einsum("tid,tjd->tij", e, e) / (4.0 * area)[:, None, None]
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    G = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsc()
    G = 0.5 * (G + G.T)  # exact symmetry; assembly is symmetric up to rounding
    G = sp.csc_matrix(G)
    G.sort_indices()

    C = sp.diags(c, format="dia")
    GCinvG = sp.csc_matrix(G @ sp.diags(1.0 / c) @ G)
    GCinvG = sp.csc_matrix(0.5 * (GCinvG + GCinvG.T))
    GCinvG.sort_indices()
    return FemMatrices(C=C, G=G, GCinvG=GCinvG)


# -- data-to-mesh projection ------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Projector:
    psi: sp.csr_matrix  # (N, n)

    @property
    def shape(self):
        return self.psi.shape

    @cached_property
    def nearest_vertex(self) -> np.ndarray:
        """Vertex carrying the largest weight in each row."""
        psi = self.psi.tocsr()
        out = np.empty(psi.shape[0], dtype=np.int64)
        for r in range(psi.shape[0]):
            lo, hi = psi.indptr[r], psi.indptr[r + 1]
            out[r] = psi.indices[lo + np.argmax(psi.data[lo:hi])]
        return out


def identity_projector(n: int) -> Projector:
    return Projector(sp.identity(n, format="csr"))


def build_projector(mesh: Mesh, data_locations) -> Projector:
    """Map data locations onto the mesh.

    Integer 1-d input selects vertices; ``(N, 3)`` float input gives
    barycentric weights of the containing triangle, accepting points within
    ``1e-6`` of the bounding-box diagonal from the surface.
    """
    loc = np.asarray(data_locations)
    n = mesh.n
    if loc.ndim == 1:
        idx = loc.astype(np.int64)
        if not np.array_equal(idx, loc) or idx.min(initial=0) < 0 or idx.max(initial=0) >= n:
            raise MeshError("vertex indices out of range")
        psi = sp.csr_matrix((np.ones(len(idx)), (np.arange(len(idx)), idx)), shape=(len(idx), n))
        return Projector(psi)

    pts = np.asarray(loc, dtype=float).reshape(-1, 3)
    tol = 1e-6 * np.linalg.norm(np.ptp(mesh.vertices, axis=0))
    tree = cKDTree(mesh.vertices)
    vt = _vertex_triangles(mesh)
    rows, cols, vals = [], [], []
    for r, x in enumerate(pts):
        hit = None
        for k in (8, 32, min(128, n)):
            _, near = tree.query(x, k=min(k, n))
            cand = np.unique(np.concatenate([vt[j] for j in np.atleast_1d(near)]))
            hit = _locate(mesh, x, cand, tol)
            if hit is not None:
                break
        if hit is None:
            raise MeshError(f"data location {r} lies off the mesh (tolerance {tol:.3g})")
        tri, w = hit
        w = np.where(np.abs(w) < 1e-12, 0.0, w)
        w = w / w.sum()
        for j in range(3):
            if w[j] != 0.0:
                rows.append(r)
                cols.append(mesh.triangles[tri, j])
                vals.append(w[j])
    psi = sp.csr_matrix((vals, (rows, cols)), shape=(len(pts), n))
    psi.sum_duplicates()
    return Projector(psi)


def _vertex_triangles(mesh):
    t = mesh.triangles
    order = np.argsort(t.ravel(), kind="stable")
    tri_of = order // 3
    counts = np.bincount(t.ravel(), minlength=mesh.n)
    return np.split(tri_of, np.cumsum(counts)[:-1])


def _locate(mesh, x, cand, tol):
    p = mesh.vertices[mesh.triangles[cand]]
    a, b, c = p[:, 0], p[:, 1], p[:, 2]
    v0, v1, v2 = b - a, c - a, x - a
    d00 = np.einsum("ij,ij->i", v0, v0)
    d01 = np.einsum("ij,ij->i", v0, v1)
    d11 = np.einsum("ij,ij->i", v1, v1)
    d20 = np.einsum("ij,ij->i", v2, v0)
    d21 = np.einsum("ij,ij->i", v2, v1)
    den = d00 * d11 - d01 * d01
    wb = (d11 * d20 - d01 * d21) / den
    wc = (d00 * d21 - d01 * d20) / den
    wa = 1.0 - wb - wc
    proj = a + wb[:, None] * v0 + wc[:, None] * v1
    dist = np.linalg.norm(x - proj, axis=1)
    # tolerance on barycentrics relative to triangle size
    size = np.sqrt(np.maximum(d00, d11))
    btol = tol / size
    ok = (wa >= -btol) & (wb >= -btol) & (wc >= -btol) & (dist <= tol)
    if not ok.any():
        return None
    i = np.flatnonzero(ok)[np.argmin(dist[ok])]
    w = np.clip(np.array([wa[i], wb[i], wc[i]]), 0.0, None)
    return int(cand[i]), w


# -- geodesics -------------------------------------------------------------------

def graph_geodesic_distances(mesh: Mesh, sources) -> np.ndarray:
    """Shortest edge-path distance (mm) from the nearest source; inf if unreachable."""
    src = np.atleast_1d(np.asarray(sources, dtype=np.int64))
    if src.size == 0:
        raise ValueError("need at least one source vertex")
    d = dijkstra(mesh.edge_graph, directed=False, indices=src, min_only=True)
    return np.asarray(d, dtype=float)


def kernel_matrix(
    mesh: Mesh, fwhm: float, vertices=None, columns=None, truncate: float = 3.0,
    chunk: int = 512, normalize: bool = True,
) -> sp.csr_matrix:
    """Gaussian kernel over graph-geodesic distance, truncated at ``truncate`` sd.

    Rows index ``vertices`` and columns index ``columns``; both default to
    all mesh vertices, and ``columns`` defaults to ``vertices`` when only
    that is given. Rows are normalized to sum to one unless ``normalize`` is
    false.
    """
    rows_v = np.arange(mesh.n) if vertices is None else np.asarray(vertices, dtype=np.int64)
    if columns is None:
        cols_v = rows_v
    elif isinstance(columns, str) and columns == "all":
        cols_v = np.arange(mesh.n)
    else:
        cols_v = np.asarray(columns, dtype=np.int64)
    nr, nc = len(rows_v), len(cols_v)
    if fwhm <= 0:
        col_of = {int(c): j for j, c in enumerate(cols_v)}
        r = [i for i, v in enumerate(rows_v) if int(v) in col_of]
        c = [col_of[int(rows_v[i])] for i in r]
        return sp.csr_matrix((np.ones(len(r)), (r, c)), shape=(nr, nc))
    sd = fwhm * FWHM_TO_SD
    cutoff = truncate * sd
    col_of = np.full(mesh.n, -1, dtype=np.int64)
    col_of[cols_v] = np.arange(nc)
    rows, cols, vals = [np.zeros(0, np.int64)], [np.zeros(0, np.int64)], [np.zeros(0)]
    for start in range(0, nr, chunk):
        block = rows_v[start:start + chunk]
        d = dijkstra(mesh.edge_graph, directed=False, indices=block, limit=cutoff * (1 + 1e-12))
        r, c = np.nonzero(np.isfinite(d) & (d <= cutoff))
        keep = col_of[c] >= 0
        r, c = r[keep], c[keep]
        rows.append(r + start)
        cols.append(col_of[c])
        vals.append(np.exp(-0.5 * (d[r, c] / sd) ** 2))
    W = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nr, nc)
    )
    W.sort_indices()
    if not normalize:
        return W
    rs = np.asarray(W.sum(axis=1)).ravel()
    rs[rs == 0] = 1.0
    return sp.csr_matrix(sp.diags(1.0 / rs) @ W)


def closest_point_on_mesh(mesh: Mesh, x, k: int = 8):
    """Closest surface point to ``x``: returns ``(point, triangle, barycentric)``."""
    x = np.asarray(x, dtype=float)
    tree = _kdtree(mesh)
    vt = _vertex_triangles(mesh)
    _, near = tree.query(x, k=min(k, mesh.n))
    cand = np.unique(np.concatenate([vt[j] for j in np.atleast_1d(near)]))
    best = (np.inf, None, None, None)
    for t in cand:
        a, b, c = mesh.vertices[mesh.triangles[t]]
        p, w = _closest_point_triangle(x, a, b, c)
        d = np.linalg.norm(x - p)
        if d < best[0]:
            best = (d, p, int(t), w)
    return best[1], best[2], best[3]


def _kdtree(mesh):
    tree = mesh.__dict__.get("_kdtree")
    if tree is None:
        tree = cKDTree(mesh.vertices)
        mesh.__dict__["_kdtree"] = tree
    return tree


def _closest_point_triangle(p, a, b, c):
    """Closest point on triangle abc to p and its barycentric weights."""
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = ab @ ap, ac @ ap
    if d1 <= 0 and d2 <= 0:
        return a, np.array([1.0, 0.0, 0.0])
    bp = p - b
    d3, d4 = ab @ bp, ac @ bp
    if d3 >= 0 and d4 <= d3:
        return b, np.array([0.0, 1.0, 0.0])
    vc = d1 * d4 - d3 * d2
    if vc <= 0 and d1 >= 0 and d3 <= 0:
        v = d1 / (d1 - d3)
        return a + v * ab, np.array([1 - v, v, 0.0])
    cp = p - c
    d5, d6 = ab @ cp, ac @ cp
    if d6 >= 0 and d5 <= d6:
        return c, np.array([0.0, 0.0, 1.0])
    vb = d5 * d2 - d1 * d6
    if vb <= 0 and d2 >= 0 and d6 <= 0:
        w = d2 / (d2 - d6)
        return a + w * ac, np.array([1 - w, 0.0, w])
    va = d3 * d6 - d5 * d4
    if va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return b + w * (c - b), np.array([0.0, 1 - w, w])
    denom = 1.0 / (va + vb + vc)
    v, w = vb * denom, vc * denom
    return a + ab * v + ac * w, np.array([1 - v - w, v, w])


def point_geodesic_distances(mesh: Mesh, point, limit: float = np.inf) -> np.ndarray:
    """Approximate geodesic distance from a surface point to every vertex.

    Straight segment to each corner of the containing triangle, then edge
    paths from there.
    """
    p, tri, _ = closest_point_on_mesh(mesh, point)
    corners = mesh.triangles[tri]
    off = np.linalg.norm(mesh.vertices[corners] - p, axis=1)
    lim = limit + off.max() if np.isfinite(limit) else np.inf
    d = dijkstra(mesh.edge_graph, directed=False, indices=corners, limit=lim)
    return np.min(d + off[:, None], axis=0)


def vertex_normals(mesh: Mesh) -> np.ndarray:
    v, t = mesh.vertices, mesh.triangles
    fn = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
    vn = np.zeros_like(v)
    for i in range(3):
        np.add.at(vn, t[:, i], fn)
    norm = np.linalg.norm(vn, axis=1, keepdims=True)
    norm[norm == 0] = 1.0
    return vn / norm
