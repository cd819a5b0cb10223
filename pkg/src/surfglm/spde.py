"""SPDE (alpha = 2) Matern precision matrices on a triangulated surface.

The prior precision for one task is ``Q = Qtilde(kappa2) / (4 pi phi)`` with

    Qtilde(kappa2) = kappa2 C + 2 G + GCinvG / kappa2

where ``phi`` is the marginal field variance. Writing ``K = kappa2 C + G``,
``Qtilde = K C^{-1} K / kappa2``, so ``log|Qtilde|`` only needs a
factorization of the much sparser ``K``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .linalg import PatternSum, SparseCholesky, Symbolic, factorize
from .mesh import FemMatrices


def _check_positive(**kw):
    for name, val in kw.items():
        a = np.asarray(val, dtype=float)
        if not np.all(np.isfinite(a)) or np.any(a <= 0):
            raise ValueError(f"{name} must be positive and finite, got {val!r}")


@dataclass
class Hyperparameters:
    """EM state ``theta = (kappa2_1..K, phi_1..K, sigma2)``."""

    kappa2: np.ndarray
    phi: np.ndarray
    sigma2: float

    def __post_init__(self):
        self.kappa2 = np.atleast_1d(np.asarray(self.kappa2, dtype=float)).copy()
        self.phi = np.atleast_1d(np.asarray(self.phi, dtype=float)).copy()
        self.sigma2 = float(self.sigma2)
        if self.kappa2.shape != self.phi.shape or self.kappa2.ndim != 1:
            raise ValueError("kappa2 and phi must be 1-d with equal length")
        _check_positive(kappa2=self.kappa2, phi=self.phi, sigma2=self.sigma2)

    @property
    def K(self) -> int:
        return len(self.kappa2)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.kappa2, self.phi, [self.sigma2]])

    @classmethod
    def from_vector(cls, vec) -> "Hyperparameters":
        vec = np.asarray(vec, dtype=float)
        K = (len(vec) - 1) // 2
        if len(vec) != 2 * K + 1:
            raise ValueError("theta vector must have odd length 2K + 1")
        return cls(vec[:K], vec[K:2 * K], vec[-1])

    def to_dict(self) -> dict:
        return {"kappa2": self.kappa2.tolist(), "phi": self.phi.tolist(), "sigma2": self.sigma2}

    @classmethod
    def from_dict(cls, d) -> "Hyperparameters":
        return cls(d["kappa2"], d["phi"], d["sigma2"])


def marginal_variance(kappa2, tau2):
    """phi = 1 / (4 pi kappa2 tau2)."""
    _check_positive(kappa2=kappa2, tau2=tau2)
    return 1.0 / (4.0 * np.pi * np.asarray(kappa2) * np.asarray(tau2))


def tau2_from_phi(kappa2, phi):
    _check_positive(kappa2=kappa2, phi=phi)
    return 1.0 / (4.0 * np.pi * np.asarray(kappa2) * np.asarray(phi))


class SpdeOperator:
    """FEM matrices plus cached pattern machinery for fast Qtilde / log-det."""

    def __init__(self, fem: FemMatrices, backend: str | None = None):
        self.fem = fem
        self.n = fem.n
        self.backend = backend
        self._qsum = PatternSum([fem.C, fem.G, fem.GCinvG])
        self._ksum = PatternSum([fem.C, fem.G])
        self._log_c = float(np.sum(np.log(fem.c_diag)))
        self._logdet_cache: dict = {}

    @cached_property
    def _k_symbolic(self) -> Symbolic:
        return Symbolic(self._ksum.combine([1.0, 1.0]), backend=self.backend)

    @cached_property
    def _q_symbolic(self) -> Symbolic:
        return Symbolic(self.qtilde(1.0), backend=self.backend)

    def qtilde(self, kappa2: float) -> sp.csc_matrix:
        _check_positive(kappa2=kappa2)
        return self._qsum.combine([kappa2, 2.0, 1.0 / kappa2])

    def logdet_qtilde(self, kappa2: float) -> float:
        """log|Qtilde(kappa2)| = 2 log|kappa2 C + G| - log|C| - n log kappa2.

        Memoized on the exact value of kappa2: line searches from a fixed
        bracket revisit the same candidates.
        """
        _check_positive(kappa2=kappa2)
        key = float(kappa2)
        hit = self._logdet_cache.get(key)
        if hit is None:
            hit = self._logdet_uncached(key)
            if len(self._logdet_cache) < 100_000:
                self._logdet_cache[key] = hit
        return hit

    def _logdet_uncached(self, kappa2: float) -> float:
        Kmat = self._ksum.combine([kappa2, 1.0])
        ld = self._k_symbolic.factor(Kmat).logdet()
        return 2.0 * ld - self._log_c - self.n * np.log(kappa2)

    def factor_qtilde(self, kappa2: float) -> SparseCholesky:
        return self._q_symbolic.factor(self.qtilde(kappa2))


def build_qtilde(kappa2: float, fem: FemMatrices) -> sp.csc_matrix:
    """``kappa2 C + 2 G + GCinvG / kappa2`` on a kappa-independent pattern."""
    return SpdeOperator(fem).qtilde(kappa2)


@dataclass
class PrecisionOperator:
    """Prior precision ``Q = scale * Qtilde`` with ``scale = 1 / (4 pi phi)``."""

    kappa2: float
    phi: float
    qtilde: sp.csc_matrix
    spde: SpdeOperator | None = field(default=None, repr=False)

    @property
    def scale(self) -> float:
        return 1.0 / (4.0 * np.pi * self.phi)

    def matrix(self) -> sp.csc_matrix:
        return sp.csc_matrix(self.qtilde * self.scale)

    def matvec(self, x):
        return self.scale * (self.qtilde @ x)

    def log_det(self) -> float:
        ld = self.spde.logdet_qtilde(self.kappa2) if self.spde else factorize(self.qtilde).logdet()
        return ld + self.n * np.log(self.scale)

    @property
    def n(self) -> int:
        return self.qtilde.shape[0]

    @cached_property
    def symbolic_factorization(self) -> Symbolic:
        return Symbolic(self.qtilde)


def build_precision(theta_k, fem: FemMatrices | SpdeOperator) -> PrecisionOperator:
    kappa2, phi = map(float, theta_k)
    _check_positive(kappa2=kappa2, phi=phi)
    spde = fem if isinstance(fem, SpdeOperator) else SpdeOperator(fem)
    return PrecisionOperator(kappa2, phi, spde.qtilde(kappa2), spde)


def sample_gaussian_field(precision, mean, seed, count: int = 1) -> np.ndarray:
    """Draw ``count`` vectors from N(mean, precision^{-1}); rows are draws.

    ``precision`` may be a sparse SPD matrix, a :class:`PrecisionOperator`
    or an existing :class:`SparseCholesky` factor.
    """
    if isinstance(precision, SparseCholesky):
        fac = precision
    else:
        if isinstance(precision, PrecisionOperator):
            precision = precision.matrix()
        fac = factorize(precision)
    mean = np.asarray(mean, dtype=float)
    if mean.ndim == 0:
        mean = np.full(fac.n, float(mean))
    if not np.all(np.isfinite(mean)):
        raise ValueError("mean must be finite")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((fac.n, count))
    return (fac.solve_lt(z) + mean[:, None]).T
