"""SQUAREM acceleration for monotone fixed-point maps (S3 step length)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class SquaremResult:
    theta: np.ndarray
    converged: bool
    iterations: int
    fevals: int
    history: list = field(default_factory=list)


def _metric(a, b, log_scale=False) -> float:
    if log_scale:
        a, b = np.log(a), np.log(b)
    return float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))


def squarem(fixed_point, theta0, epsilon: float = 1e-3, max_iter: int = 100,
            accelerate: bool = True, valid=None, log_metric: bool = False) -> SquaremResult:
    """Iterate ``fixed_point`` until ``mean((theta_s - theta_{s-1})^2) < epsilon``.

    One accelerated cycle evaluates ``t1 = f(t)``, ``t2 = f(t1)``, forms
    ``r = t1 - t``, ``v = t2 - t1 - r`` and ``alpha = -|r|/|v|`` (capped at
    -1), then stabilizes the extrapolant ``t - 2 alpha r + alpha^2 v`` with
    one more ``f``. The extrapolant is rejected in favour of ``f(t2)`` when
    it fails ``valid``, when ``f`` raises on it, or when its fixed-point
    residual exceeds that of the plain step.

    With ``accelerate=False`` each iteration is a single ``f`` evaluation.
    """
    valid = valid or (lambda x: bool(np.all(np.isfinite(x))))
    theta = np.asarray(theta0, dtype=float)
    history = [{"iteration": 0, "theta": theta.tolist(), "metric": None, "fevals": 0}]
    fevals = 0
    best = (np.inf, theta)
    for it in range(1, max_iter + 1):
        accepted = None
        if not accelerate:
            new = np.asarray(fixed_point(theta))
            fevals += 1
        else:
            t1 = np.asarray(fixed_point(theta))
            t2 = np.asarray(fixed_point(t1))
            fevals += 2
            r = t1 - theta
            v = t2 - t1 - r
            nv = np.linalg.norm(v)
            if nv == 0.0 or not np.isfinite(nv):
                new, accepted = t2, False
            else:
                alpha = min(-np.linalg.norm(r) / nv, -1.0)
                cand = theta - 2.0 * alpha * r + alpha**2 * v
                new = None
                if valid(cand):
                    try:
                        stab = np.asarray(fixed_point(cand))
                        fevals += 1
                    except Exception:  # noqa: BLE001 - any failure rejects the extrapolant
                        fevals += 1
                        stab = None
                    if stab is not None and valid(stab) and \
                            _metric(stab, cand) <= _metric(t2, t1):
                        new, accepted = stab, True
                if new is None:
                    new = np.asarray(fixed_point(t2))
                    fevals += 1
                    accepted = False
        m = _metric(new, theta, log_metric)
        history.append({"iteration": it, "theta": new.tolist(), "metric": m,
                        "fevals": fevals, "extrapolated": accepted})
        theta = new
        if m < best[0]:
            best = (m, new)
        if m < epsilon:
            return SquaremResult(theta, True, it, fevals, history)
    return SquaremResult(best[1], False, max_iter, fevals, history)
