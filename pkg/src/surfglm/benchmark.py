"""Simulation studies: single-subject replicates and group subset comparisons.

Rows are long format: one per (scenario, replicate, method).
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .em import EMOptions
from .group import GroupModel, build_contrast, classical_group, group_inference
from .inference import dice, rmse
from .mesh import build_fem_matrices, identity_projector
from .pipeline import activation_maps, fit_method, mask_of, prepare_subject
from .preprocess import PreprocessOptions
from .seeding import derive_int, rng
from .simulate import SimulationScenario, simulate_population

log = logging.getLogger(__name__)

COLUMNS = ["scenario", "replicate", "method", "rmse", "dice", "seconds", "iterations", "converged", "error"]


@dataclass
class StudySettings:
    methods: tuple = ("em", "classical")
    preprocess: PreprocessOptions = field(default_factory=PreprocessOptions)
    em: EMOptions = field(default_factory=EMOptions)
    gamma: float = 0.0  # threshold for the Dice column
    alpha: float = 0.01
    q: float = 0.01
    H: int = 1000
    seed: int = 0


def _row(name, rep, method, **kw):
    row = dict.fromkeys(COLUMNS, "")
    row.update(scenario=name, replicate=rep, method=method)
    row.update(kw)
    return row


def single_subject_replicate(name: str, scenario: SimulationScenario, replicate: int,
                             st: StudySettings) -> list:
    """Simulate one subject, fit every method on the same data, score against truth."""
    sc = replace(scenario, M=1, seed=derive_int(st.seed, "replicate", scenario.seed, replicate))
    pop = simulate_population(sc)
    sub = pop.subjects[0]
    fem = build_fem_matrices(pop.mesh)
    prep = prepare_subject(sub.scans, pop.design.X, pop.mesh, fem, options=st.preprocess,
                           design_is_scaled=True)
    truth = sub.truth.beta_true[prep.keep]
    rows = []
    for method in st.methods:
        try:
            t0 = time.perf_counter()
            fit = fit_method(prep.inp, method, st.em)
            maps = activation_maps(fit, prep.inp.psi, [st.gamma], st.alpha, st.q, st.H, sc.seed)
            secs = time.perf_counter() - t0
            d = np.mean([dice(mask_of(maps[(k, st.gamma)]), truth[:, k] > st.gamma)
                         for k in range(sc.K)])
            rows.append(_row(name, replicate, method, rmse=rmse(fit.beta, truth), dice=float(d),
                             seconds=secs, iterations=fit.iterations, converged=fit.converged))
        except Exception as exc:  # noqa: BLE001 - recorded per row, the study continues
            log.exception("replicate %s/%d/%s failed", name, replicate, method)
            rows.append(_row(name, replicate, method, error=f"{type(exc).__name__}: {exc}"))
    return rows


def group_subset_study(name: str, scenario: SimulationScenario, subsets: int, subset_size: int,
                       st: StudySettings, task: int | None = None) -> list:
    """Fit every subject once, then compare group maps on random subsets.

    Dice is measured against the population field above ``st.gamma`` and
    averaged over tasks (or for ``task`` alone); RMSE compares the group
    mean map with the population field.
    """
    pop = simulate_population(scenario)
    fem = build_fem_matrices(pop.mesh)
    psi = identity_projector(pop.mesh.n).psi
    preps, fits = [], []
    for sub in pop.subjects:
        prep = prepare_subject(sub.scans, pop.design.X, pop.mesh, fem, options=st.preprocess,
                               design_is_scaled=True)
        if len(prep.keep) != pop.mesh.n:
            raise ValueError("group study needs every vertex retained")
        preps.append(prep)
    t_fit = {}
    for method in st.methods:
        t0 = time.perf_counter()
        fits.append([fit_method(p.inp, method, st.em) for p in preps])
        t_fit[method] = (time.perf_counter() - t0) / len(preps)
    tasks = range(scenario.K) if task is None else [task]
    M = len(preps)
    rows = []
    for s in range(subsets):
        idx = np.sort(rng(scenario.seed, "subset", s).choice(M, size=subset_size, replace=False))
        for method, mfits in zip(st.methods, fits):
            try:
                t0 = time.perf_counter()
                sel = [mfits[i] for i in idx]
                dices, errs = [], []
                if method == "em":
                    G = GroupModel.from_subjects([f.model for f in sel], [f.em.theta_hat for f in sel],
                                                 H=st.H, psis=[psi] * len(sel))
                for k in tasks:
                    c = build_contrast(len(sel), scenario.K, task=k)
                    truth = pop.population_fields[k].values
                    if method == "em":
                        res = group_inference(G, c, [st.gamma], st.alpha, seed=derive_int(scenario.seed, "subset", s))
                        mask, est = res.excursions[float(st.gamma)].active, res.mean
                    else:
                        cg = classical_group([f.beta for f in sel], [f.se for f in sel],
                                             [f.df for f in sel], c, [st.gamma], st.q)
                        mask, est = cg.masks[float(st.gamma)], cg.estimate
                    dices.append(dice(mask, truth > st.gamma))
                    errs.append(rmse(est, truth))
                secs = time.perf_counter() - t0 + t_fit[method] * subset_size
                rows.append(_row(name, s, method, rmse=float(np.mean(errs)), dice=float(np.mean(dices)),
                                 seconds=secs, iterations=int(np.median([f.iterations for f in sel])),
                                 converged=all(f.converged for f in sel)))
            except Exception as exc:  # noqa: BLE001
                log.exception("subset %s/%d/%s failed", name, s, method)
                rows.append(_row(name, s, method, error=f"{type(exc).__name__}: {exc}"))
    return rows


def run_benchmark(config: dict, threads: int = 1) -> list:
    """Run every scenario in ``config``; see the README for the config layout."""
    st = settings_from_config(config)
    jobs = []
    for i, entry in enumerate(config.get("scenarios", [])):
        name = entry.get("name", f"scenario{i}")
        sc = SimulationScenario.from_dict(entry.get("scenario", {}))
        grp = entry.get("group")
        if grp:
            jobs.append(lambda name=name, sc=sc, grp=grp: group_subset_study(
                name, sc, int(grp.get("subsets", 10)), int(grp.get("subset_size", 10)), st))
        else:
            for r in range(int(entry.get("replicates", 1))):
                jobs.append(lambda name=name, sc=sc, r=r: single_subject_replicate(name, sc, r, st))
    if threads > 1 and len(jobs) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(lambda j: j(), jobs))
    else:
        parts = [j() for j in jobs]
    return [row for part in parts for row in part]


def settings_from_config(config: dict) -> StudySettings:
    pre = PreprocessOptions(**config.get("preprocess", {}))
    em = EMOptions(**config.get("em", {}))
    return StudySettings(
        methods=tuple(config.get("methods", ("em", "classical"))), preprocess=pre, em=em,
        gamma=float(config.get("gamma", 0.0)), alpha=float(config.get("alpha", 0.01)),
        q=float(config.get("fdr_q", 0.01)), H=int(config.get("H", 1000)), seed=int(config.get("seed", 0)),
    )


def write_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
