"""Command-line front end: ``surfglm {simulate,fit,group,benchmark}``.

Exit codes: 0 success, 2 invalid input, 3 EM did not converge (results are
still written), 4 file-system error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .benchmark import run_benchmark, write_csv
from .em import EMError, EMOptions, SpatialModel
from .group import GroupModel, build_contrast, classical_group, group_inference, length_weights
from .inference import ExcursionResult
from .io import (GROUP_SCHEMA, RESULT_SCHEMA, FormatError, read_bold, read_json, read_matrix,
                 read_stimuli, resolve, validate_result, write_bold, write_json, write_matrix,
                 write_stimuli)
from .mesh import MeshError, build_fem_matrices, identity_projector, load_mesh, save_mesh
from .pipeline import activation_maps, expand, fit_method, prepare_subject
from .preprocess import PreprocessError, PreprocessOptions, stimulus_from_blocks
from .simulate import SimulationScenario, simulate_population
from .spde import Hyperparameters

log = logging.getLogger("surfglm")

EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGED, EXIT_IO = 0, 2, 3, 4

# built-in option defaults; config files use the same keys
DEFAULTS = {
    "seed": 0, "threads": 1, "method": "em", "epsilon": 1e-3, "ns": 50, "max_iter": 100,
    "gamma": "0,0.5,1", "alpha": 0.01, "fdr_q": 0.01, "H": 1000, "ar_order": 6, "fwhm": 6.0,
    "exact_traces": None, "weights": "equal",
}


class UsageError(ValueError):
    pass


def _settings(args) -> dict:
    """Flags override the ``--config`` JSON, which overrides built-in defaults."""
    cfg = read_json(args.config) if getattr(args, "config", None) else {}
    out = dict(DEFAULTS)
    out.update({k: v for k, v in cfg.items()})
    for k in DEFAULTS:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    out["_config"] = cfg
    out["_config_dir"] = Path(args.config).parent if getattr(args, "config", None) else Path(".")
    _check(out)
    return out


def _gammas(s) -> list:
    if isinstance(s, (list, tuple)):
        return [float(x) for x in s]
    try:
        return [float(x) for x in str(s).split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"bad gamma list {s!r}") from exc


def _check(o):
    if not o["epsilon"] > 0:
        raise UsageError("epsilon must be positive")
    if not 0 < o["alpha"] < 1:
        raise UsageError("alpha must lie in (0, 1)")
    if not 0 <= o["fdr_q"] <= 1:
        raise UsageError("fdr-q must lie in [0, 1]")
    if int(o["ns"]) < 1 or int(o["threads"]) < 1 or int(o["H"]) < 100:
        raise UsageError("ns and threads must be >= 1 and H >= 100")
    if o["method"] not in ("em", "classical"):
        raise UsageError("method must be em or classical")
    o["gamma"] = _gammas(o["gamma"])


def _em_options(o) -> EMOptions:
    return EMOptions(epsilon=float(o["epsilon"]), max_iter=int(o["max_iter"]), ns=int(o["ns"]),
                     seed=int(o["seed"]), exact_traces=o["exact_traces"], threads=int(o["threads"]))


def _pre_options(o) -> PreprocessOptions:
    return PreprocessOptions(ar_order=int(o["ar_order"]), fwhm=float(o["fwhm"]), threads=int(o["threads"]))


# -- simulate -------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    o = _settings(args)
    scen = dict(o["_config"].get("scenario", o["_config"]))
    for k in list(scen):
        if k in DEFAULTS and k not in SimulationScenario.__dataclass_fields__:
            scen.pop(k)
    if args.seed is not None or "seed" not in scen:
        scen["seed"] = int(o["seed"])
    sc = SimulationScenario.from_dict(scen)
    pop = simulate_population(sc, threads=int(o["threads"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = {"mesh": "mesh.txt", "stimuli": "stimuli.txt", "design": "design.txt",
             "population_truth": "population_beta.txt", "subjects": []}
    save_mesh(pop.mesh, out / files["mesh"])
    write_stimuli(out / files["stimuli"], pop.design.names, pop.design.onsets, pop.design.durations)
    write_matrix(out / files["design"], pop.design.X)
    write_matrix(out / files["population_truth"], np.column_stack([f.values for f in pop.population_fields]))
    for m, sub in enumerate(pop.subjects):
        entry = {"bold": [], "truth": f"sub-{m:03d}_beta.txt"}
        for r, scan in enumerate(sub.scans):
            name = f"sub-{m:03d}_run-{r + 1}_bold.txt"
            write_bold(out / name, scan)
            entry["bold"].append(name)
        write_matrix(out / entry["truth"], sub.truth.beta_true)
        files["subjects"].append(entry)
    write_json(out / "manifest.json", {"format": "surfglm-simulation/1", "scenario": sc.to_dict(),
                                       "n_vertices": pop.mesh.n, "files": files})
    print(f"wrote {len(pop.subjects)} subject(s) on a {pop.mesh.n}-vertex mesh to {out}")
    return EXIT_OK


# -- fit ------------------------------------------------------------------------------------

def _load_inputs(spec: dict, base: Path):
    mesh = load_mesh(resolve(base, spec["mesh"]))
    scans = [read_bold(resolve(base, b)) for b in spec["bold"]]
    if spec.get("design"):
        design, scaled = read_matrix(resolve(base, spec["design"])), True
        names = [f"task{k + 1}" for k in range(design.shape[1])]
    else:
        names, on, du = read_stimuli(resolve(base, spec["stimuli"]))
        T, tr = scans[0].T, scans[0].tr
        design, scaled = [stimulus_from_blocks(a, b, T, tr) for a, b in zip(on, du)], False
    Z = read_matrix(resolve(base, spec["nuisance"])) if spec.get("nuisance") else None
    locs = None
    if spec.get("locations"):
        L = read_matrix(resolve(base, spec["locations"]))
        locs = L[:, 0].astype(np.int64) if L.shape[1] == 1 else L
    return mesh, scans, design, scaled, names, Z, locs


def _input_spec(args, o) -> dict:
    cfg = o["_config"]
    base = o["_config_dir"]
    spec = {}
    for key in ("mesh", "bold", "stimuli", "design", "nuisance", "locations"):
        val = getattr(args, key, None)
        if val is not None:
            spec[key] = [str(Path(p).resolve()) for p in val] if key == "bold" else str(Path(val).resolve())
        elif cfg.get(key) is not None:
            v = cfg[key]
            if key == "bold" and isinstance(v, str):
                v = [v]
            spec[key] = [str(resolve(base, p).resolve()) for p in v] if key == "bold" \
                else str(resolve(base, v).resolve())
    for req in ("mesh", "bold"):
        if req not in spec:
            raise UsageError(f"--{req} is required")
    if "stimuli" not in spec and "design" not in spec:
        raise UsageError("one of --stimuli or --design is required")
    return spec


def _mask_entries(maps, keep, n_locations, alpha, q) -> list:
    out = []
    for (k, g), m in sorted(maps.items()):
        exc = isinstance(m, ExcursionResult)
        active = expand((m.active if exc else m).astype(np.int64), keep, n_locations, fill=0)
        out.append({"task": int(k), "gamma": g, "alpha": alpha if exc else None, "q": None if exc else q,
                    "joint_prob": m.joint_prob if exc else None, "active": active.tolist()})
    return out


def _theta_dict(th: Hyperparameters | None):
    return None if th is None else th.to_dict()


def cmd_fit(args) -> int:
    o = _settings(args)
    spec = _input_spec(args, o)
    mesh, scans, design, scaled, names, Z, locs = _load_inputs(spec, Path("."))
    fem = build_fem_matrices(mesh)
    prep = prepare_subject(scans, design, mesh, fem, locs, _pre_options(o), Z, design_is_scaled=scaled)
    fit = fit_method(prep.inp, o["method"], _em_options(o))
    maps = activation_maps(fit, prep.inp.psi, o["gamma"], o["alpha"], o["fdr_q"], int(o["H"]), int(o["seed"]))
    N = prep.n_locations
    doc = {
        "format": "surfglm-fit/1", "version": __version__, "method": fit.method,
        "converged": bool(fit.converged), "iterations": int(fit.iterations),
        "n_locations": int(N), "n_vertices": int(mesh.n), "tasks": list(names),
        "keep": prep.keep.tolist(),
        "beta": np.where(np.isnan(b := expand(fit.beta, prep.keep, N)), None, b).tolist(),
        "se": np.where(np.isnan(s := expand(fit.se, prep.keep, N)), None, s).tolist(),
        "df": None if fit.df is None else int(fit.df),
        "masks": _mask_entries(maps, prep.keep, N, o["alpha"], o["fdr_q"]),
        "inputs": spec,
        "options": {k: v for k, v in o.items() if not k.startswith("_")},
        "preprocess_report": prep.report,
        "timing": {"fit_seconds": fit.seconds},
    }
    if fit.em is not None:
        doc["theta_hat"] = _theta_dict(fit.em.theta_hat)
        doc["theta0"] = _theta_dict(fit.em.theta0)
        doc["history"] = [{"iteration": h["iteration"], "theta": h["theta"], "metric": h["metric"]}
                          for h in fit.em.history]
        doc["timing"].update(fit.em.timing)
        doc["mesh_beta"] = np.column_stack([fit.em.posterior.mu_task(k) for k in range(fit.beta.shape[1])]).tolist()
    else:
        doc["theta_hat"] = None
        doc["history"] = []
    validate_result(doc, RESULT_SCHEMA)
    out = Path(args.out)
    write_json(out, doc)
    write_matrix(out.with_suffix(".beta.txt"), np.nan_to_num(expand(fit.beta, prep.keep, N)))
    if fit.em is None:
        print(f"classical GLM: wrote {out}")
    else:
        print(f"em: {'converged' if fit.converged else 'NOT converged'} "
              f"after {fit.iterations} iteration(s); wrote {out}")
    return EXIT_OK if fit.converged else EXIT_NONCONVERGED


# -- group ------------------------------------------------------------------------------------

def cmd_group(args) -> int:
    o = _settings(args)
    paths = args.results or o["_config"].get("results")
    if not paths:
        raise UsageError("--results is required")
    docs = [read_json(p) for p in paths]
    methods = {d["method"] for d in docs}
    if len(methods) != 1:
        raise UsageError("all results must come from the same method")
    K = {len(d["tasks"]) for d in docs}
    if len(K) != 1:
        raise UsageError("results disagree on the number of tasks")
    K = K.pop()
    M = len(docs)
    method = methods.pop()
    if o["weights"] == "length":
        lam = length_weights([sum(read_bold(b).T for b in d["inputs"]["bold"]) for d in docs])
    else:
        lam = np.full(M, 1.0 / M)
    contrasts = [build_contrast(M, K, task=k) for k in range(K)]
    masks, means = [], []
    doc = {"format": "surfglm-group/1", "version": __version__, "method": method, "M": M,
           "lambda": lam.tolist(), "inputs": [str(Path(p).resolve()) for p in paths],
           "contrasts": [{"task": k, **c.to_dict()} for k, c in enumerate(contrasts)]}
    if method == "em":
        models = []
        for d in docs:
            spec = d["inputs"]
            mesh, scans, design, scaled, _, Z, locs = _load_inputs(spec, Path("."))
            opts = d["options"]
            pre = PreprocessOptions(ar_order=int(opts["ar_order"]), fwhm=float(opts["fwhm"]),
                                    threads=int(o["threads"]))
            prep = prepare_subject(scans, design, mesh, build_fem_matrices(mesh), locs, pre, Z, scaled)
            models.append(SpatialModel(prep.inp))
        nv = {m.n for m in models}
        if len(nv) != 1:
            raise UsageError("subjects must share one mesh")
        psi = identity_projector(nv.pop()).psi
        thetas = [Hyperparameters.from_dict(d["theta_hat"]) for d in docs]
        G = GroupModel.from_subjects(models, thetas, lam, H=int(o["H"]), psis=[psi] * M)
        doc["theta_G"] = G.theta_G.to_dict()
        for k, c in enumerate(contrasts):
            res = group_inference(G, c, o["gamma"], o["alpha"], seed=int(o["seed"]))
            means.append(res.mean)
            for g, e in res.excursions.items():
                masks.append({"task": k, "gamma": g, "alpha": o["alpha"], "q": None,
                              "joint_prob": e.joint_prob, "active": e.active.astype(int).tolist()})
    else:
        nan = lambda a: np.array([[np.nan if x is None else x for x in r] for r in a], float)  # noqa: E731
        betas = [nan(d["beta"]) for d in docs]
        ses = [nan(d["se"]) for d in docs]
        doc["theta_G"] = None
        for k, c in enumerate(contrasts):
            cg = classical_group(betas, ses, [d["df"] for d in docs], c, o["gamma"], o["fdr_q"])
            means.append(cg.estimate)
            for g, m in cg.masks.items():
                masks.append({"task": k, "gamma": g, "alpha": None, "q": o["fdr_q"], "joint_prob": None,
                              "active": m.astype(int).tolist()})
    doc["mean"] = np.where(np.isnan(mm := np.column_stack(means)), None, mm).tolist()
    doc["masks"] = masks
    validate_result(doc, GROUP_SCHEMA)
    out = Path(args.out)
    write_json(out, doc)
    write_matrix(out.with_suffix(".mean.txt"), np.nan_to_num(np.column_stack(means)))
    print(f"group ({method}, M={M}): wrote {len(masks)} masks to {out}")
    return EXIT_OK


# -- benchmark -------------------------------------------------------------------------------

def cmd_benchmark(args) -> int:
    o = _settings(args)
    cfg = dict(o["_config"])
    if not cfg.get("scenarios"):
        raise UsageError("benchmark config needs a 'scenarios' list")
    if args.seed is not None or "seed" not in cfg:
        cfg["seed"] = int(o["seed"])
    cfg.setdefault("em", {})
    for key in ("epsilon", "ns", "max_iter"):
        if getattr(args, key, None) is not None or key not in cfg["em"]:
            cfg["em"][key] = o[key]
    cfg["em"].setdefault("seed", int(cfg["seed"]))
    for key in ("alpha", "fdr_q", "H"):
        if getattr(args, key, None) is not None or key not in cfg:
            cfg[key] = o[key]
    rows = run_benchmark(cfg, threads=int(o["threads"]))
    write_csv(args.out, rows)
    failed = sum(1 for r in rows if r["error"])
    print(f"wrote {len(rows)} rows to {args.out} ({failed} failed)")
    return EXIT_OK


# -- entry point -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="surfglm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"surfglm {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp_):
        sp_.add_argument("--config", help="JSON file with defaults for any option")
        sp_.add_argument("--seed", type=int)
        sp_.add_argument("--threads", type=int)

    def fitting(sp_):
        sp_.add_argument("--method", choices=["em", "classical"])
        sp_.add_argument("--epsilon", type=float, help="EM stopping tolerance (default 0.001)")
        sp_.add_argument("--ns", type=int, help="Hutchinson probes per iteration (default 50)")
        sp_.add_argument("--max-iter", dest="max_iter", type=int)
        sp_.add_argument("--gamma", help="comma-separated activation thresholds (default 0,0.5,1)")
        sp_.add_argument("--alpha", type=float, help="excursion error level (default 0.01)")
        sp_.add_argument("--fdr-q", dest="fdr_q", type=float, help="BH level for the classical maps")
        sp_.add_argument("--H", type=int, help="posterior draws for activation maps (default 1000)")

    s = sub.add_parser("simulate", help="generate a synthetic population")
    common(s)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="preprocess and fit one subject")
    common(f)
    fitting(f)
    f.add_argument("--mesh")
    f.add_argument("--bold", nargs="+", help="one time-series file per run")
    f.add_argument("--stimuli")
    f.add_argument("--design", help="pre-scaled T x K design matrix (instead of --stimuli)")
    f.add_argument("--nuisance")
    f.add_argument("--locations", help="N x 1 vertex indices or N x 3 coordinates")
    f.add_argument("--ar-order", dest="ar_order", type=int)
    f.add_argument("--fwhm", type=float)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    g = sub.add_parser("group", help="combine single-subject fits")
    common(g)
    fitting(g)
    g.add_argument("--results", nargs="+")
    g.add_argument("--weights", choices=["equal", "length"])
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_group)

    b = sub.add_parser("benchmark", help="run simulation studies and write a CSV table")
    common(b)
    fitting(b)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, FormatError, MeshError, PreprocessError, KeyError, ValueError,
            EMError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
