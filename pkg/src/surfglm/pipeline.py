"""Glue from raw scans to fitted models and activation maps."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .em import EMOptions, FitResult, SpatialModel, SubjectInput, classical_glm, fit_subject, \
    sample_posterior_beta
from .group import stack_runs
from .inference import ExcursionResult, classical_activation, excursion_set
from .mesh import FemMatrices, Mesh, Projector, build_projector, identity_projector
from .preprocess import PreprocessOptions, run_preprocessing
from .seeding import seed_sequence


@dataclass
class PreparedSubject:
    inp: SubjectInput
    keep: np.ndarray  # retained data locations
    n_locations: int  # before masking
    report: dict


def prepare_subject(scans, design, mesh: Mesh, fem: FemMatrices, locations=None,
                    options: PreprocessOptions | None = None, Z=None,
                    design_is_scaled: bool = False) -> PreparedSubject:
    """Preprocess every run, keep locations valid in all runs, stack runs in time."""
    scans = list(scans)
    opt = options or PreprocessOptions()
    N = scans[0].N
    if any(s.N != N for s in scans):
        raise ValueError("runs disagree on the number of locations")
    if locations is None:
        if N != mesh.n:
            raise ValueError(f"{N} data locations but {mesh.n} mesh vertices; supply locations")
        proj = identity_projector(mesh.n)
        locs = None
    else:
        proj = build_projector(mesh, locations)
        if proj.shape[0] != N:
            raise ValueError("locations do not match the number of data columns")
        locs = np.asarray(locations)
    results = []
    for s in scans:
        if locs is not None:
            # AR smoothing runs over the vertex nearest to each location
            s = type(s)(s.y, s.tr, proj.nearest_vertex)
        results.append(run_preprocessing(s, design, Z=Z, mesh=mesh, options=opt,
                                         design_is_scaled=design_is_scaled))
    keep = results[0].keep
    for r in results[1:]:
        keep = np.intersect1d(keep, r.keep)
    inputs = []
    psi = sp.csr_matrix(proj.psi)[keep]
    for r in results:
        sel = np.searchsorted(r.keep, keep)
        X = r.X[sel] if r.X.ndim == 3 else r.X
        inputs.append(SubjectInput(r.y[:, sel], X, psi, fem))
    report = {"masked": sorted({int(v) for r in results for v in r.report["masked"]}),
              "ar_failed": sorted({int(v) for r in results for v in r.report.get("ar_failed", [])})}
    return PreparedSubject(stack_runs(inputs), keep, N, report)


@dataclass
class MethodFit:
    method: str
    beta: np.ndarray  # N' x K
    se: np.ndarray | None
    df: int | None
    em: FitResult | None
    model: SpatialModel | None
    seconds: float

    @property
    def converged(self) -> bool:
        return True if self.em is None else self.em.converged

    @property
    def iterations(self) -> int:
        return 0 if self.em is None else self.em.iterations


def fit_method(inp: SubjectInput, method: str, options: EMOptions | None = None) -> MethodFit:
    t0 = time.perf_counter()
    if method == "classical":
        c = classical_glm(inp.y, inp.X)
        return MethodFit("classical", c.beta, c.se, c.df, None, None, time.perf_counter() - t0)
    if method != "em":
        raise ValueError(f"unknown method {method!r}")
    opt = options or EMOptions()
    model = SpatialModel(inp, backend=opt.backend)
    res = fit_subject(inp, opt, model=model)
    return MethodFit("em", res.beta_mean, res.classical.se, res.classical.df, res, model,
                     time.perf_counter() - t0)


def activation_maps(fit: MethodFit, psi, gammas, alpha: float = 0.01, q: float = 0.01,
                    H: int = 1000, seed: int = 0) -> dict:
    """``{(task, gamma): mask or ExcursionResult}`` for either method."""
    out = {}
    K = fit.beta.shape[1]
    if fit.method == "classical":
        for k in range(K):
            for g in gammas:
                out[(k, float(g))] = classical_activation(fit.beta[:, k], fit.se[:, k], fit.df, g, q)
        return out
    draws = sample_posterior_beta(fit.em.posterior, psi, H, seed_sequence(seed, "sample", 0))
    for k in range(K):
        for g in gammas:
            out[(k, float(g))] = excursion_set(draws[k], g, alpha)
    return out


def mask_of(x) -> np.ndarray:
    return x.active if isinstance(x, ExcursionResult) else np.asarray(x, bool)


def expand(values, keep, n_locations, fill=np.nan):
    """Scatter per-kept-location values back onto all locations."""
    v = np.asarray(values)
    out = np.full((n_locations,) + v.shape[1:], fill, dtype=v.dtype if fill is not np.nan else float)
    out[keep] = v
    return out


__all__ = ["PreparedSubject", "MethodFit", "Projector", "activation_maps", "expand",
           "fit_method", "mask_of", "prepare_subject"]
