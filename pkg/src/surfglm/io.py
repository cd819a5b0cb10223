"""Plain-text data formats and JSON result documents.

* time series: ``bold <T> <N> <tr>`` then T rows of N numbers
* matrices: ``matrix <rows> <cols>`` then the rows
* stimuli: ``task <name>`` followed by ``<onset> <duration>`` lines
* results / group results / scenarios / manifests: JSON

Floats are written with ``repr`` so every value round-trips exactly.
"""
from __future__ import annotations

import json
from pathlib import Path

import jsonschema
import numpy as np

from .preprocess import ScanData


class FormatError(ValueError):
    """A data file does not follow its documented format."""


def _fmt_rows(A) -> str:
    return "".join(" ".join(map(repr, row)) + "\n" for row in np.asarray(A, dtype=float).tolist())


def _read_lines(path):
    with open(path) as fh:
        return [ln.split() for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]


def _numbers(rows, ncol, path):
    try:
        A = np.array([[float(x) for x in r] for r in rows], dtype=float)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if any(len(r) != ncol for r in rows):
        raise FormatError(f"{path}: every row must have {ncol} values")
    return A.reshape(len(rows), ncol)


# -- matrices -----------------------------------------------------------------------

def write_matrix(path, A) -> None:
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    with open(path, "w") as fh:
        fh.write(f"matrix {A.shape[0]} {A.shape[1]}\n")
        fh.write(_fmt_rows(A))


def read_matrix(path) -> np.ndarray:
    lines = _read_lines(path)
    if not lines or lines[0][0] != "matrix" or len(lines[0]) != 3:
        raise FormatError(f"{path}: missing 'matrix <rows> <cols>' header")
    r, c = int(lines[0][1]), int(lines[0][2])
    if len(lines) - 1 != r:
        raise FormatError(f"{path}: header says {r} rows, found {len(lines) - 1}")
    return _numbers(lines[1:], c, path)


# -- time series --------------------------------------------------------------------

def write_bold(path, scan: ScanData) -> None:
    T, N = scan.y.shape
    with open(path, "w") as fh:
        fh.write(f"bold {T} {N} {float(scan.tr)!r}\n")
        fh.write(_fmt_rows(scan.y))


def read_bold(path) -> ScanData:
    lines = _read_lines(path)
    if not lines or lines[0][0] != "bold" or len(lines[0]) != 4:
        raise FormatError(f"{path}: missing 'bold <T> <N> <tr>' header")
    try:
        T, N, tr = int(lines[0][1]), int(lines[0][2]), float(lines[0][3])
    except ValueError as exc:
        raise FormatError(f"{path}: bad header: {exc}") from exc
    if len(lines) - 1 != T:
        raise FormatError(f"{path}: header says T={T}, found {len(lines) - 1} rows")
    return ScanData(_numbers(lines[1:], N, path), tr)


# -- stimuli --------------------------------------------------------------------------

def write_stimuli(path, names, onsets, durations) -> None:
    with open(path, "w") as fh:
        for name, on, du in zip(names, onsets, durations):
            fh.write(f"task {name}\n")
            for a, b in zip(on, du):
                fh.write(f"{float(a)!r} {float(b)!r}\n")


def read_stimuli(path):
    """Returns ``(names, onsets, durations)``; one list entry per task."""
    names, onsets, durations = [], [], []
    for row in _read_lines(path):
        if row[0] == "task":
            if len(row) != 2:
                raise FormatError(f"{path}: expected 'task <name>'")
            names.append(row[1])
            onsets.append([])
            durations.append([])
            continue
        if not names:
            raise FormatError(f"{path}: onset line before any 'task' line")
        if len(row) != 2:
            raise FormatError(f"{path}: expected '<onset> <duration>'")
        try:
            onsets[-1].append(float(row[0]))
            durations[-1].append(float(row[1]))
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    if not names:
        raise FormatError(f"{path}: no tasks")
    return names, onsets, durations


# -- JSON ---------------------------------------------------------------------------------

_num = {"type": "number"}
_num_list = {"type": "array", "items": _num}
_theta = {
    "type": "object",
    "required": ["kappa2", "phi", "sigma2"],
    "properties": {"kappa2": _num_list, "phi": _num_list, "sigma2": _num},
}
_masks = {
    "type": "array",
    "items": {
        "type": "object",
        "required": ["task", "gamma", "active"],
        "properties": {
            "task": {"type": "integer"}, "gamma": _num,
            "alpha": {"type": ["number", "null"]}, "q": {"type": ["number", "null"]},
            "active": {"type": "array", "items": {"type": "integer", "enum": [0, 1]}},
            "joint_prob": {"type": ["number", "null"]},
        },
    },
}

RESULT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "single-subject fit",
    "type": "object",
    "required": ["format", "method", "converged", "n_locations", "tasks", "beta", "masks", "timing"],
    "properties": {
        "format": {"const": "surfglm-fit/1"},
        "method": {"enum": ["em", "classical"]},
        "converged": {"type": "boolean"},
        "iterations": {"type": "integer"},
        "n_locations": {"type": "integer"},
        "tasks": {"type": "array", "items": {"type": "string"}},
        "theta_hat": {"oneOf": [_theta, {"type": "null"}]},
        "theta0": {"oneOf": [_theta, {"type": "null"}]},
        "history": {"type": "array", "items": {
            "type": "object", "required": ["iteration", "theta"],
            "properties": {"iteration": {"type": "integer"}, "theta": _num_list,
                           "metric": {"type": ["number", "null"]}}}},
        "beta": {"type": "array", "items": _num_list},
        "se": {"type": ["array", "null"]},
        "df": {"type": ["integer", "null"]},
        "keep": {"type": "array", "items": {"type": "integer"}},
        "masks": _masks,
        "timing": {"type": "object", "additionalProperties": _num},
        "inputs": {"type": "object"},
        "options": {"type": "object"},
    },
}

GROUP_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "group analysis",
    "type": "object",
    "required": ["format", "method", "M", "lambda", "contrasts", "masks"],
    "properties": {
        "format": {"const": "surfglm-group/1"},
        "method": {"enum": ["em", "classical"]},
        "M": {"type": "integer"},
        "theta_G": {"oneOf": [_theta, {"type": "null"}]},
        "lambda": _num_list,
        "contrasts": {"type": "array"},
        "mean": {"type": "array", "items": _num_list},
        "masks": _masks,
    },
}


def validate_result(doc: dict, schema: dict = RESULT_SCHEMA) -> None:
    jsonschema.validate(doc, schema)


def write_json(path, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True, allow_nan=False)
        fh.write("\n")


def read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def resolve(base, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else Path(base) / p
