"""Task-fMRI preprocessing: HRF design, scaling, nuisance regression, prewhitening."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .mesh import Mesh, kernel_matrix

log = logging.getLogger(__name__)

HRF_DEFAULTS = dict(a1=6.0, a2=12.0, b1=0.9, b2=0.9, c=0.35)


class PreprocessError(ValueError):
    pass


@dataclass
class ScanData:
    """BOLD series ``y`` (T x N) sampled every ``tr`` seconds.

    ``locations`` gives the mesh vertex closest to each column (used for
    spatial smoothing of AR parameters); ``None`` means column ``v`` sits on
    vertex ``v``.
    """

    y: np.ndarray
    tr: float
    locations: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        if self.y.ndim != 2 or self.y.shape[0] < 2:
            raise PreprocessError("y must be a T x N matrix with T >= 2")
        if self.tr <= 0:
            raise PreprocessError("tr must be positive")

    @property
    def T(self) -> int:
        return self.y.shape[0]

    @property
    def N(self) -> int:
        return self.y.shape[1]


# -- design -----------------------------------------------------------------------

def hrf_double_gamma(t, a1=6.0, a2=12.0, b1=0.9, b2=0.9, c=0.35):
    """Canonical double-gamma haemodynamic response."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("HRF is defined for t >= 0")
    d1, d2 = a1 * b1, a2 * b2
    return (t / d1) ** a1 * np.exp(-(t - d1) / b1) - c * (t / d2) ** a2 * np.exp(-(t - d2) / b2)


def stimulus_from_blocks(onsets, durations, T: int, tr: float) -> np.ndarray:
    """On/off series on the TR grid: 1 where ``onset <= t*tr < onset + duration``."""
    times = np.arange(T) * tr
    stim = np.zeros(T)
    for on, dur in zip(onsets, durations):
        stim[(times >= on) & (times < on + dur)] = 1.0
    return stim


def convolve_design(stimulus, tr: float, hrf_params: dict | None = None) -> np.ndarray:
    """Causal rectangle-rule convolution of a stimulus with the HRF on the TR grid."""
    stim = np.asarray(stimulus, dtype=float)
    T = len(stim)
    h = hrf_double_gamma(np.arange(T) * tr, **(hrf_params or {}))
    return np.convolve(stim, h)[:T] * tr


def scale_design(X) -> np.ndarray:
    """Divide each column by its maximum, then center it."""
    X = np.array(X, dtype=float, copy=True)
    if X.ndim == 1:
        return scale_design(X[:, None])[:, 0]
    mx = X.max(axis=0)
    for j in range(X.shape[1]):
        if mx[j] == 0 or np.ptp(X[:, j]) == 0:
            raise PreprocessError(f"design column {j} is constant or has zero maximum")
    X /= mx
    return X - X.mean(axis=0)


# -- response scaling and nuisance --------------------------------------------------

def scale_percent_change(y) -> np.ndarray:
    """``100 (y - mean) / mean`` columnwise; raises on zero-mean columns."""
    y = np.asarray(y, dtype=float)
    ybar = y.mean(axis=0)
    if np.any(ybar == 0) or not np.all(np.isfinite(ybar)):
        raise PreprocessError("cannot express a zero-mean series as percent signal change")
    return 100.0 * (y - ybar) / ybar


def nuisance_regress(y, Z) -> np.ndarray:
    """Residual of ``y`` (T or T x N) after least squares on the columns of ``Z``."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if np.linalg.matrix_rank(Z) < Z.shape[1]:
        raise PreprocessError("nuisance matrix is rank deficient")
    Qz, _ = np.linalg.qr(Z)
    y = np.asarray(y, dtype=float)
    return y - Qz @ (Qz.T @ y)


# -- autoregressive noise ------------------------------------------------------------

@dataclass
class ArModel:
    """AR(p) coefficients (N x p) and innovation variances (N,)."""

    coeffs: np.ndarray
    innovation_var: np.ndarray
    failed: np.ndarray = field(default=None)

    def __post_init__(self):
        self.coeffs = np.atleast_2d(np.asarray(self.coeffs, dtype=float))
        self.innovation_var = np.atleast_1d(np.asarray(self.innovation_var, dtype=float))
        if self.failed is None:
            self.failed = np.zeros(len(self.innovation_var), bool)

    @property
    def order(self) -> int:
        return self.coeffs.shape[1]


def estimate_ar_yule_walker(resid, order: int = 6) -> tuple[np.ndarray, float]:
    """Yule-Walker AR(order) fit; returns ``(coeffs, innovation_variance)``."""
    x = np.asarray(resid, dtype=float)
    T = len(x)
    if T <= order:
        raise PreprocessError(f"series of length {T} too short for AR({order})")
    x = x - x.mean()
    r = np.array([x[: T - k] @ x[k:] for k in range(order + 1)]) / T
    if not r[0] > 1e-14 * max(1.0, np.abs(x).max()) ** 2:
        raise PreprocessError("singular Yule-Walker system (constant series)")
    try:
        phi = sla.solve_toeplitz(r[:-1], r[1:])
    except np.linalg.LinAlgError as exc:
        raise PreprocessError("singular Yule-Walker system") from exc
    var = float(r[0] - phi @ r[1:])
    if not var > 0:
        raise PreprocessError("non-positive innovation variance")
    return phi, var


def ar_max_root_modulus(coeffs) -> float:
    """Largest modulus of the roots of ``z^p - phi_1 z^{p-1} - ... - phi_p``.

    The process is stationary iff this is < 1 (equivalently all roots of
    ``1 - sum phi_j z^j`` lie outside the unit circle).
    """
    phi = np.asarray(coeffs, dtype=float)
    if phi.size == 0 or not np.any(phi):
        return 0.0
    return float(np.abs(np.roots(np.concatenate([[1.0], -phi]))).max())


def make_stationary(coeffs, radius: float = 1.01, step: float = 0.02) -> np.ndarray:
    """Shrink toward zero by the first factor in {1, 1-step, ...} that puts all
    AR roots outside ``radius``."""
    phi = np.asarray(coeffs, dtype=float)
    nsteps = int(round(1.0 / step))
    for i in range(nsteps + 1):
        s = 1.0 - i * step
        if ar_max_root_modulus(s * phi) < 1.0 / radius:
            return s * phi
    return np.zeros_like(phi)


def ar_autocovariance(coeffs, nlags: int, innovation_var: float = 1.0) -> np.ndarray:
    """Autocovariances ``gamma_0..gamma_{nlags-1}`` of a stationary AR(p).

    Solves the extended Yule-Walker system for lags 0..p, then recurses.
    """
    phi = np.asarray(coeffs, dtype=float)
    p = len(phi)
    if p == 0 or not np.any(phi):
        out = np.zeros(nlags)
        out[0] = innovation_var
        return out
    # gamma_k - sum_j phi_j gamma_|k-j| = var * [k == 0], k = 0..p
    A = np.eye(p + 1)
    for k in range(p + 1):
        for j in range(1, p + 1):
            A[k, abs(k - j)] -= phi[j - 1]
    b = np.zeros(p + 1)
    b[0] = innovation_var
    g = np.linalg.solve(A, b)
    out = np.zeros(max(nlags, p + 1))
    out[: p + 1] = g
    for k in range(p + 1, nlags):
        out[k] = phi @ out[k - p:k][::-1]
    return out[:nlags]


def smooth_ar_params(ar: ArModel, kernel, mesh_vertices=None, fwhm: float = 6.0,
                     restabilize: bool = True) -> ArModel:
    """Kernel-weighted average of AR coefficients and innovation variances.

    ``kernel`` is either a row-normalized sparse weight matrix over the
    locations or a :class:`Mesh`, in which case a truncated Gaussian kernel
    of the given FWHM over graph-geodesic distance is built on
    ``mesh_vertices`` (all vertices when omitted).
    """
    W = kernel_matrix(kernel, fwhm, vertices=mesh_vertices) if isinstance(kernel, Mesh) else kernel
    ok = ~ar.failed
    Wk = W[:, ok] if not ok.all() else W
    denom = np.asarray(Wk.sum(axis=1)).ravel()
    denom[denom == 0] = 1.0
    coeffs = (Wk @ ar.coeffs[ok]) / denom[:, None]
    var = (Wk @ ar.innovation_var[ok]) / denom
    if restabilize:
        coeffs = np.array([make_stationary(c) for c in coeffs])
    return ArModel(coeffs, var, ar.failed.copy())


def whitening_matrix(coeffs, T: int, var_factor: float = 1.0) -> np.ndarray:
    """``D = S^{-1/2}`` for the T x T AR covariance ``S = var_factor * R(coeffs)``."""
    acov = ar_autocovariance(coeffs, T, 1.0) * var_factor
    S = sla.toeplitz(acov)
    lam, U = np.linalg.eigh(S)
    if lam.min() <= 0:
        raise PreprocessError("AR covariance is not positive definite")
    return (U / np.sqrt(lam)) @ U.T


def prewhiten(y_v, X_v, coeffs, var_factor: float = 1.0):
    """Premultiply a series and its design by ``S^{-1/2}``."""
    y_v = np.asarray(y_v, dtype=float)
    D = whitening_matrix(coeffs, len(y_v), var_factor)
    return D @ y_v, D @ np.asarray(X_v, dtype=float)


# -- pipeline -------------------------------------------------------------------

@dataclass
class PreprocessOptions:
    ar_order: int = 6
    fwhm: float = 6.0
    hrf_params: dict | None = None
    threads: int = 1
    round_ar: int | None = None  # cache whitening matrices on rounded AR params


@dataclass
class PreprocessResult:
    y: np.ndarray  # T x N' model-ready response
    X: np.ndarray  # N' x T x K location-specific design (or T x K if no whitening)
    keep: np.ndarray  # indices of the original locations retained
    design: np.ndarray  # scaled, unwhitened T x K design
    ar: ArModel | None
    report: dict

    @property
    def locationwise(self) -> bool:
        return self.X.ndim == 3


def build_design(stimuli, T: int, tr: float, hrf_params=None) -> np.ndarray:
    """Convolve and scale a list of stimulus series (each length T)."""
    cols = [convolve_design(s, tr, hrf_params) for s in stimuli]
    return scale_design(np.column_stack(cols))


def run_preprocessing(scan: ScanData, design, Z=None, mesh: Mesh | None = None,
                      options: PreprocessOptions | None = None, design_is_scaled=False):
    """Full pipeline from raw BOLD to model-ready ``(y, X)``.

    ``design`` is either a list of raw stimulus series (convolved and scaled
    here) or an already scaled ``T x K`` matrix when ``design_is_scaled``.
    """
    opt = options or PreprocessOptions()
    T, N = scan.y.shape
    if design_is_scaled:
        X = np.asarray(design, dtype=float)
    else:
        X = build_design(design, T, scan.tr, opt.hrf_params)
    if X.shape[0] != T:
        raise PreprocessError(f"design has {X.shape[0]} rows, data has {T}")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise PreprocessError("design matrix is rank deficient")

    report: dict = {"masked": {}, "ar_failed": []}
    ybar = scan.y.mean(axis=0)
    bad = (ybar == 0) | ~np.all(np.isfinite(scan.y), axis=0)
    for v in np.flatnonzero(bad):
        report["masked"][int(v)] = "zero-mean or non-finite series"
    keep = np.flatnonzero(~bad)
    y = scale_percent_change(scan.y[:, keep])
    if Z is not None:
        y = nuisance_regress(y, Z)

    if opt.ar_order <= 0:
        return PreprocessResult(y, X, keep, X, None, report)

    # residuals of the task regression drive the AR fit
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    p = opt.ar_order
    coeffs = np.zeros((len(keep), p))
    var = np.ones(len(keep))
    failed = np.zeros(len(keep), bool)
    for i in range(len(keep)):
        try:
            c, s2 = estimate_ar_yule_walker(resid[:, i], p)
            coeffs[i] = make_stationary(c)
            var[i] = s2
        except PreprocessError:
            failed[i] = True
    report["ar_failed"] = keep[failed].tolist()
    ar = ArModel(coeffs, var, failed)

    locs = keep if scan.locations is None else np.asarray(scan.locations)[keep]
    if mesh is not None and opt.fwhm > 0 and not failed.all():
        ar = smooth_ar_params(ar, kernel_matrix(mesh, opt.fwhm, vertices=locs))
    # whitening keeps the average noise scale: variances enter relative to their mean
    good = ~ar.failed
    mean_var = ar.innovation_var[good].mean() if good.any() else 1.0
    factors = np.where(good, ar.innovation_var / mean_var, 1.0) if mean_var > 0 else np.ones(len(keep))
    coeffs_used = np.where(good[:, None], ar.coeffs, 0.0)

    cache: dict = {}

    def whiten(i):
        c, f = coeffs_used[i], factors[i]
        if opt.round_ar is not None:
            c = np.round(c, opt.round_ar)
            f = float(np.round(f, opt.round_ar))
            key = (tuple(c), f)
            D = cache.get(key)
            if D is None:
                D = cache.setdefault(key, whitening_matrix(c, T, f))
        else:
            D = whitening_matrix(c, T, f)
        return D @ y[:, i], D @ X

    if opt.threads > 1 and opt.round_ar is None:
        with ThreadPoolExecutor(opt.threads) as ex:
            out = list(ex.map(whiten, range(len(keep))))
    else:
        out = [whiten(i) for i in range(len(keep))]
    yw = np.column_stack([o[0] for o in out]) if out else np.zeros((T, 0))
    Xw = np.stack([o[1] for o in out]) if out else np.zeros((0, T, X.shape[1]))
    report["n_whitening_matrices"] = len(cache) if opt.round_ar is not None else len(keep)
    return PreprocessResult(yw, Xw, keep, X, ar, report)
