"""Activation maps and accuracy metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

MIN_SAMPLES = 100


@dataclass
class ExcursionResult:
    active: np.ndarray  # bool per location
    gamma: float
    alpha: float
    joint_prob_trace: np.ndarray  # joint probability of each inclusion-ordered prefix
    order: np.ndarray  # locations by decreasing marginal exceedance
    marginal: np.ndarray  # empirical P(beta_v > gamma)
    n_samples: int

    @property
    def joint_prob(self) -> float:
        """Empirical joint exceedance probability of the returned set."""
        p = int(self.active.sum())
        return 1.0 if p == 0 else float(self.joint_prob_trace[p - 1])

    @property
    def mc_error(self) -> float:
        """Binomial standard error of :attr:`joint_prob`."""
        q = self.joint_prob
        return float(np.sqrt(q * (1.0 - q) / self.n_samples))


def excursion_set(samples, gamma: float, alpha: float) -> ExcursionResult:
    """Largest set whose draws jointly exceed ``gamma`` with frequency ``>= 1 - alpha``.

    ``samples`` is H x V. Locations are ranked by their marginal exceedance
    frequency (ties by index); the joint frequency of every prefix of that
    ranking is computed from the position of each draw's first failure, and
    the longest admissible prefix is returned.
    """
    s = np.asarray(samples, dtype=float)
    if s.ndim != 2:
        raise ValueError("samples must be an H x V array")
    H, V = s.shape
    if H < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} draws, got {H}")
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite posterior draws")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    exceed = s > gamma
    marg = exceed.mean(axis=0)
    order = np.lexsort((np.arange(V), -marg))
    ex = exceed[:, order]
    # first position (in ranking order) at which each draw falls below gamma
    first_fail = np.where(ex.all(axis=1), V, np.argmin(ex, axis=1))
    counts = np.bincount(first_fail, minlength=V + 1)
    # draws with first_fail >= p satisfy the length-p prefix
    surviving = H - np.cumsum(counts)[:-1]
    trace = surviving / H
    need = (1.0 - alpha) * H - 1e-9 * H
    ok = np.flatnonzero(surviving >= need)
    p = int(ok[-1] + 1) if len(ok) and ok[0] == 0 else 0
    # surviving is nonincreasing, so ok is a leading run
    active = np.zeros(V, bool)
    active[order[:p]] = True
    return ExcursionResult(active, float(gamma), float(alpha), trace, order, marg, H)


def marginal_exceedance(mu, sd, gamma: float):
    """``P(beta > gamma)`` under ``N(mu, sd^2)``."""
    mu = np.asarray(mu, dtype=float)
    sd = np.asarray(sd, dtype=float)
    if np.any(sd <= 0):
        raise ValueError("standard deviations must be positive")
    return stats.norm.sf((gamma - mu) / sd)


def classical_activation(beta_hat, se, df, gamma: float, q: float = 0.01) -> np.ndarray:
    """One-sided t-tests of ``beta > gamma`` with Benjamini-Hochberg control at ``q``.

    Locations with missing estimates are left out of the test family.
    """
    b = np.asarray(beta_hat, dtype=float)
    s = np.asarray(se, dtype=float)
    ok = np.isfinite(b) & np.isfinite(s)
    if np.any(s[ok] <= 0):
        raise ValueError("standard errors must be positive")
    mask = np.zeros(b.shape, bool)
    if q <= 0 or not ok.any():
        return mask
    p = stats.t.sf((b[ok] - gamma) / s[ok], df)
    mask[ok] = bh_reject(p, q)
    return mask


def bh_reject(pvalues, q: float) -> np.ndarray:
    p = np.asarray(pvalues, dtype=float)
    if q <= 0 or p.size == 0:
        return np.zeros(p.shape, bool)
    return stats.false_discovery_control(p, method="bh") <= q


def rmse(estimate, truth) -> float:
    e = np.asarray(estimate, dtype=float)
    t = np.asarray(truth, dtype=float)
    if e.shape != t.shape:
        raise ValueError(f"shape mismatch {e.shape} vs {t.shape}")
    return float(np.sqrt(np.mean((e - t) ** 2)))


def dice(a, b) -> float:
    """``2|A & B| / (|A| + |B|)`` for boolean masks or index collections.

    Two empty sets count as identical (1.0).
    """
    A, B = _as_set(a), _as_set(b)
    if not A and not B:
        return 1.0
    return 2.0 * len(A & B) / (len(A) + len(B))


def _as_set(x) -> set:
    arr = np.asarray(x)
    if arr.dtype == bool:
        return set(np.flatnonzero(arr).tolist())
    return set(arr.ravel().tolist())
