"""Synthetic cortical-surface task fMRI.

Meshes are icospheres (100 mm radius) or planar grids. Activation fields
are geodesic disks smoothed by a Gaussian kernel and rescaled to a peak
amplitude; subjects see the population disks moved by a random geodesic
distance. Scans are ``100 + X beta + AR noise``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.signal import lfilter

from .mesh import (FWHM_TO_SD, Mesh, closest_point_on_mesh, kernel_matrix,
                   point_geodesic_distances)
from .preprocess import ScanData, ar_max_root_modulus, build_design, stimulus_from_blocks
from .seeding import rng

SPHERE_RADIUS = 100.0
GRID_SPACING = 4.0
BASELINE = 100.0


# -- meshes ---------------------------------------------------------------------

def icosphere(level: int, radius: float = SPHERE_RADIUS) -> Mesh:
    """Subdivided icosahedron with ``10 * 4**level + 2`` vertices."""
    g = (1.0 + np.sqrt(5.0)) / 2.0
    verts = [(-1, g, 0), (1, g, 0), (-1, -g, 0), (1, -g, 0),
             (0, -1, g), (0, 1, g), (0, -1, -g), (0, 1, -g),
             (g, 0, -1), (g, 0, 1), (-g, 0, -1), (-g, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    v = [np.array(p, float) / np.linalg.norm(p) for p in verts]
    for _ in range(level):
        cache: dict = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = v[i] + v[j]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return Mesh(np.array(v) * radius, np.array(faces, dtype=np.int64))


def grid_mesh(rows: int, cols: int, spacing: float = GRID_SPACING) -> Mesh:
    """Planar ``rows x cols`` lattice, each cell split into two triangles."""
    if rows < 2 or cols < 2:
        raise ValueError("grid needs at least 2 x 2 vertices")
    yy, xx = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    v = np.column_stack([xx.ravel() * spacing, yy.ravel() * spacing, np.zeros(rows * cols)])
    idx = np.arange(rows * cols).reshape(rows, cols)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    t = np.concatenate([np.column_stack([a, b, d]), np.column_stack([a, d, c])])
    return Mesh(v, t)


def make_synthetic_mesh(kind: str, n_target: int, radius: float = SPHERE_RADIUS,
                        spacing: float = GRID_SPACING) -> Mesh:
    """Smallest icosphere with at least ``n_target`` vertices, or a square grid.

    The grid has ``ceil(sqrt(n_target))`` vertices per side.
    """
    if kind == "sphere":
        if n_target < 12:
            raise ValueError("sphere meshes have at least 12 vertices")
        level = 0
        while 10 * 4**level + 2 < n_target:
            level += 1
        return icosphere(level, radius)
    if kind == "grid":
        if n_target < 4:
            raise ValueError("grid meshes have at least 4 vertices")
        side = int(np.ceil(np.sqrt(n_target) - 1e-9))
        return grid_mesh(side, side, spacing)
    raise ValueError(f"unknown mesh kind {kind!r}")


# -- activation fields ----------------------------------------------------------------

@dataclass
class CoefficientField:
    values: np.ndarray  # per-vertex amplitude
    centers: np.ndarray  # (m, 3) surface points
    radius: float
    fwhm: float
    max_coef: float


def _disk_radius(mesh: Mesh, sparsity: float, n_regions: int) -> float:
    return float(np.sqrt(sparsity * mesh.total_area / (n_regions * np.pi)))


def field_from_centers(mesh: Mesh, centers, radius: float, fwhm: float, max_coef: float) -> np.ndarray:
    """Indicator of the union of geodesic disks, smoothed, rescaled and thresholded."""
    reach = radius + (3.0 * fwhm * FWHM_TO_SD if fwhm > 0 else 0.0)
    dmin = np.full(mesh.n, np.inf)
    for c in np.atleast_2d(centers):
        dmin = np.minimum(dmin, point_geodesic_distances(mesh, c, limit=reach))
    ind = (dmin <= radius).astype(float)
    if not ind.any():
        # a disk narrower than the mesh spacing still marks its nearest vertex
        for c in np.atleast_2d(centers):
            ind[int(np.argmin(np.linalg.norm(mesh.vertices - c, axis=1)))] = 1.0
    rows = np.flatnonzero(dmin <= reach * (1 + 1e-12)) if fwhm > 0 else np.flatnonzero(ind)
    vals = np.zeros(mesh.n)
    if fwhm > 0:
        W = kernel_matrix(mesh, fwhm, vertices=rows, columns="all")
        vals[rows] = W @ ind
    else:
        vals[rows] = 1.0
    vals *= max_coef / vals.max()
    vals[vals < 0.01 * max_coef] = 0.0
    return vals


def simulate_coefficient_field(mesh: Mesh, max_coef: float = 2.0, smooth_fwhm_mm: float | None = None,
                               sparsity: float = 0.04, seed: int = 0, n_regions: int = 2,
                               index: int = 0) -> CoefficientField:
    """Random smooth sparse activation map.

    ``sparsity`` is the fraction of surface area covered by the disks
    before smoothing; ``smooth_fwhm_mm`` defaults to 1.5 disk radii, which
    puts the mean of the nonzero values near a quarter of the peak.
    """
    g = rng(seed, "field", index)
    radius = _disk_radius(mesh, sparsity, n_regions)
    fwhm = 1.5 * radius if smooth_fwhm_mm is None else float(smooth_fwhm_mm)
    idx = g.choice(mesh.n, size=n_regions, replace=False)
    centers = mesh.vertices[idx].copy()
    vals = field_from_centers(mesh, centers, radius, fwhm, max_coef)
    return CoefficientField(vals, centers, radius, fwhm, float(max_coef))


def _tangent_step(mesh: Mesh, point, distance: float, g: np.random.Generator) -> np.ndarray:
    p, tri, _ = closest_point_on_mesh(mesh, point)
    a, b, c = mesh.vertices[mesh.triangles[tri]]
    nrm = np.cross(b - a, c - a)
    nrm /= np.linalg.norm(nrm)
    e1 = b - a - ((b - a) @ nrm) * nrm
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(nrm, e1)
    ang = g.uniform(0.0, 2.0 * np.pi)
    target = p + distance * (np.cos(ang) * e1 + np.sin(ang) * e2)
    if np.allclose(mesh.vertices[:, 2], mesh.vertices[0, 2]):
        return closest_point_on_mesh(mesh, target)[0]
    # curved surfaces: march in small steps so the path follows the surface
    steps = max(1, int(np.ceil(distance / 2.0)))
    cur, direc = p, target - p
    for _ in range(steps):
        cur = closest_point_on_mesh(mesh, cur + direc / steps)[0]
    return cur


def translate_field(mesh: Mesh, fld: CoefficientField, shift_mm: float, seed: int,
                    index: int = 0) -> CoefficientField:
    """Move each disk center by an exponential(mean ``shift_mm``) distance in a random direction."""
    if shift_mm <= 0:
        return replace(fld, values=fld.values.copy(), centers=fld.centers.copy())
    g = rng(seed, "translate", index)
    new = np.array([_tangent_step(mesh, c, g.exponential(shift_mm), g) for c in fld.centers])
    vals = field_from_centers(mesh, new, fld.radius, fld.fwhm, fld.max_coef)
    return CoefficientField(vals, new, fld.radius, fld.fwhm, fld.max_coef)


# -- designs and scans ---------------------------------------------------------------------

@dataclass
class BlockDesign:
    onsets: list  # per task, seconds
    durations: list
    stimuli: np.ndarray  # K x T on/off
    X: np.ndarray  # T x K convolved and scaled
    names: list


def make_block_design(K: int, T: int, tr: float = 1.0, block_s: float = 12.0, seed: int = 0) -> BlockDesign:
    """Cycles of ``K + 1`` equal slots (one rest); slot order shuffled per cycle."""
    g = rng(seed, "design")
    total = T * tr
    onsets = [[] for _ in range(K)]
    t0 = 0.0
    while t0 < total:
        for slot, k in enumerate(g.permutation(K + 1)):
            start = t0 + slot * block_s
            if k < K and start < total:
                onsets[k].append(start)
        t0 += (K + 1) * block_s
    durations = [[block_s] * len(o) for o in onsets]
    stim = np.array([stimulus_from_blocks(onsets[k], durations[k], T, tr) for k in range(K)])
    X = build_design(list(stim), T, tr)
    return BlockDesign(onsets, durations, stim, X, [f"task{k + 1}" for k in range(K)])


def ar_noise(T: int, N: int, noise_var: float, ar_coeffs, g: np.random.Generator,
             burn_in: int = 200) -> np.ndarray:
    ar = np.asarray(ar_coeffs if ar_coeffs is not None else [], dtype=float)
    if len(ar) and ar_max_root_modulus(ar) >= 1.0:
        raise ValueError("noise AR coefficients are not stationary")
    e = g.standard_normal((T + burn_in, N)) * np.sqrt(noise_var)
    if len(ar):
        e = lfilter([1.0], np.concatenate([[1.0], -ar]), e, axis=0)
    return e[burn_in:]


def simulate_scan(mesh: Mesh | None, beta_true, design, noise_var: float = 1.0, ar_coeffs=None,
                  seed: int = 0, tr: float = 1.0, index: tuple = (), baseline: float = BASELINE) -> ScanData:
    """``y = baseline + X beta' + noise``; ``beta_true`` is N x K, ``design`` T x K."""
    beta = np.asarray(beta_true, dtype=float)
    X = np.asarray(design, dtype=float)
    if beta.ndim == 1:
        beta = beta[:, None]
    if X.shape[1] != beta.shape[1]:
        raise ValueError("design and coefficients disagree on K")
    if mesh is not None and beta.shape[0] != mesh.n:
        raise ValueError("coefficient field length does not match the mesh")
    T, N = X.shape[0], beta.shape[0]
    noise = ar_noise(T, N, noise_var, ar_coeffs, rng(seed, "noise", *index)) if noise_var > 0 \
        else np.zeros((T, N))
    return ScanData(baseline + X @ beta.T + noise, tr)


# -- scenarios -------------------------------------------------------------------------

@dataclass
class SimulationScenario:
    n_target: int = 2000
    K: int = 2
    T: int = 300
    tr: float = 1.0
    max_coef: float = 2.0
    noise_var: float = 1.0
    ar_coeffs: list = field(default_factory=list)
    M: int = 1
    subject_shift_mm: float = 0.0
    runs: int = 1
    seed: int = 0
    mesh_kind: str = "grid"
    sparsity: float = 0.04
    smooth_fwhm_mm: float | None = None
    n_regions: int = 2
    block_s: float = 12.0
    run_effect: float = 0.1  # fraction of max_coef

    def __post_init__(self):
        for name in ("n_target", "K", "T", "M", "runs"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.max_coef > 0:
            raise ValueError("max_coef must be positive")
        if self.noise_var < 0 or self.tr <= 0:
            raise ValueError("noise_var must be >= 0 and tr > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationScenario":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**known)


@dataclass
class GroundTruth:
    beta_true: np.ndarray  # n x K for this subject
    population: np.ndarray  # n x K
    run_effects: list  # per run, n x K additive fields
    design: BlockDesign

    def active(self, gamma: float) -> np.ndarray:
        """n x K boolean: truth strictly above ``gamma``."""
        return self.beta_true > gamma

    def population_active(self, gamma: float) -> np.ndarray:
        return self.population > gamma


@dataclass
class SubjectSim:
    scans: list  # one ScanData per run
    truth: GroundTruth


@dataclass
class Population:
    scenario: SimulationScenario
    mesh: Mesh
    design: BlockDesign
    population_fields: list  # per task CoefficientField
    subjects: list  # SubjectSim


def _run_effect(mesh: Mesh, support: np.ndarray, size: float, g: np.random.Generator, fwhm: float):
    raw = np.zeros(mesh.n)
    idx = np.flatnonzero(support)
    if len(idx) == 0 or size == 0:
        return raw
    W = kernel_matrix(mesh, fwhm, vertices=idx)
    sm = W @ g.standard_normal(len(idx))
    sm /= max(np.abs(sm).max(), 1e-300)
    raw[idx] = size * sm
    return raw


def simulate_subject(sc: SimulationScenario, mesh: Mesh, design: BlockDesign, pop: list, m: int) -> SubjectSim:
    fields = [translate_field(mesh, pop[k], sc.subject_shift_mm, sc.seed, index=m * 1000 + k)
              for k in range(sc.K)]
    beta = np.column_stack([f.values for f in fields])
    runs, effects = [], []
    for r in range(sc.runs):
        if sc.runs > 1 and sc.run_effect > 0:
            g = rng(sc.seed, "run_effect", m, r)
            eff = np.column_stack([
                _run_effect(mesh, beta[:, k] > 0, sc.run_effect * sc.max_coef, g, pop[k].fwhm or 6.0)
                for k in range(sc.K)])
        else:
            eff = np.zeros_like(beta)
        effects.append(eff)
        runs.append(simulate_scan(mesh, beta + eff, design.X, sc.noise_var, sc.ar_coeffs,
                                  sc.seed, sc.tr, index=(m, r)))
    truth = GroundTruth(beta, np.column_stack([f.values for f in pop]), effects, design)
    return SubjectSim(runs, truth)


def simulate_population(sc: SimulationScenario, threads: int = 1) -> Population:
    """Population fields per task, then per-subject translated fields and scans."""
    mesh = make_synthetic_mesh(sc.mesh_kind, sc.n_target)
    design = make_block_design(sc.K, sc.T, sc.tr, sc.block_s, sc.seed)
    pop = [simulate_coefficient_field(mesh, sc.max_coef, sc.smooth_fwhm_mm, sc.sparsity,
                                      sc.seed, sc.n_regions, index=k) for k in range(sc.K)]
    if threads > 1 and sc.M > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as ex:
            subjects = list(ex.map(lambda m: simulate_subject(sc, mesh, design, pop, m), range(sc.M)))
    else:
        subjects = [simulate_subject(sc, mesh, design, pop, m) for m in range(sc.M)]
    return Population(sc, mesh, design, pop, subjects)
