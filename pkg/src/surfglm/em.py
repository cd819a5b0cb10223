"""EM estimation of the surface-based spatial Bayesian GLM.

Model, for mesh coefficients ``w = (w_1, ..., w_K)`` stacked task-major::

    y = X Psi w + e,   e ~ N(0, sigma2 I),   w_k ~ N(0, Q_k^{-1}),
    Q_k = Qtilde(kappa2_k) / (4 pi phi_k)

E-step: ``w | y ~ N(mu, Sigma)`` with ``Sigma^{-1} = Q + Psi'X'X Psi / sigma2``.
M-step: closed forms for ``sigma2`` and ``phi_k``, a 1-d search for
``kappa2_k``. Every trace ``Tr(M E[w_k w_k'])`` is ``Tr(M Sigma_kk) +
mu_k' M mu_k``; the first term is exact for small problems and a Hutchinson
estimate otherwise.
"""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .linalg import NotPositiveDefiniteError, PatternSum, SparseCholesky, Symbolic
from .mesh import FemMatrices, Projector
from .spde import Hyperparameters, SpdeOperator
from .squarem import SquaremResult, squarem

log = logging.getLogger(__name__)

FOUR_PI = 4.0 * np.pi
EXACT_TRACE_MAX = 1500
KAPPA2_BOUNDS = (1e-4, 1e4)
GRID_POINTS = 49  # log-spaced kappa2 grid preceding the golden-section refinement


class EMError(RuntimeError):
    pass


# -- inputs -----------------------------------------------------------------------

@dataclass
class SubjectInput:
    """Model-ready data for one subject (one hemisphere).

    y   : T x N responses.
    X   : N x T x K location-specific design, or a shared T x K design.
    psi : N x n projector (sparse matrix or :class:`Projector`).
    """

    y: np.ndarray
    X: np.ndarray
    psi: sp.spmatrix
    fem: FemMatrices

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.X = np.asarray(self.X, dtype=float)
        if isinstance(self.psi, Projector):
            self.psi = self.psi.psi
        self.psi = sp.csr_matrix(self.psi)
        T, N = self.y.shape
        if self.X.ndim == 2:
            if self.X.shape[0] != T:
                raise ValueError("shared design must have T rows")
        elif self.X.ndim != 3 or self.X.shape[:2] != (N, T):
            raise ValueError("location design must be N x T x K")
        if self.psi.shape != (N, self.fem.n):
            raise ValueError(f"projector shape {self.psi.shape} != ({N}, {self.fem.n})")
        if not (np.all(np.isfinite(self.y)) and np.all(np.isfinite(self.X))):
            raise ValueError("non-finite values in y or X")

    @property
    def T(self) -> int:
        return self.y.shape[0]

    @property
    def N(self) -> int:
        return self.y.shape[1]

    @property
    def K(self) -> int:
        return self.X.shape[-1]

    @property
    def n(self) -> int:
        return self.fem.n

    @cached_property
    def xtx(self) -> np.ndarray:  # N x K x K
        if self.X.ndim == 2:
            return np.broadcast_to(self.X.T @ self.X, (self.N, self.K, self.K)).copy()
        return np.einsum("vtk,vtl->vkl", self.X, self.X)

    @cached_property
    def xty(self) -> np.ndarray:  # N x K
        if self.X.ndim == 2:
            return self.y.T @ self.X
        return np.einsum("vtk,tv->vk", self.X, self.y)

    @cached_property
    def yty(self) -> float:
        return float(np.sum(self.y * self.y))

    @cached_property
    def A(self) -> sp.csc_matrix:
        """``Psi' X' X Psi`` (nK x nK), task-major."""
        P = self.psi
        blocks = [[sp.csc_matrix(P.T @ sp.diags(self.xtx[:, k, l]) @ P) for l in range(self.K)]
                  for k in range(self.K)]
        A = sp.bmat(blocks, format="csc")
        A = sp.csc_matrix(0.5 * (A + A.T))
        A.sort_indices()
        return A

    @cached_property
    def b(self) -> np.ndarray:
        """``Psi' X' y`` (nK,)."""
        return np.concatenate([self.psi.T @ self.xty[:, k] for k in range(self.K)])

    def design_at(self, v) -> np.ndarray:
        return self.X if self.X.ndim == 2 else self.X[v]


# -- classical GLM ----------------------------------------------------------------------

@dataclass
class ClassicalFit:
    beta: np.ndarray  # N x K
    resid_var: np.ndarray  # N
    se: np.ndarray  # N x K
    df: int
    mask: np.ndarray  # True where the location was fit


def classical_glm(y, X) -> ClassicalFit:
    """Per-location OLS. ``X`` is T x K shared or N x T x K."""
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    T, N = y.shape
    if X.ndim == 2:
        X = np.broadcast_to(X, (N,) + X.shape)
    K = X.shape[-1]
    df = T - K
    if df <= 0:
        raise ValueError("need more time points than regressors")
    xtx = np.einsum("vtk,vtl->vkl", X, X)
    xty = np.einsum("vtk,tv->vk", X, y)
    beta = np.full((N, K), np.nan)
    se = np.full((N, K), np.nan)
    rv = np.full(N, np.nan)
    mask = np.zeros(N, bool)
    for v in range(N):
        try:
            if np.linalg.cond(xtx[v]) > 1e12:
                raise np.linalg.LinAlgError
            inv = np.linalg.inv(xtx[v])
        except np.linalg.LinAlgError:
            continue
        b = inv @ xty[v]
        r = y[:, v] - X[v] @ b
        rv[v] = r @ r / df
        beta[v] = b
        se[v] = np.sqrt(rv[v] * np.diag(inv))
        mask[v] = True
    return ClassicalFit(beta, rv, se, df, mask)


# -- posterior ---------------------------------------------------------------------------

@dataclass
class TraceSummaries:
    """Second-moment traces for one E-step.

    ``tC[k] = Tr(C E[w_k w_k'])`` etc., with ``E[ww'] = Sigma + mu mu'``;
    ``tA = Tr(A E[ww'])`` for ``A = Psi'X'X Psi``. The ``*_sigma`` arrays
    hold the ``Tr(M Sigma)`` parts alone.
    """

    tC: np.ndarray
    tG: np.ndarray
    tH: np.ndarray
    tA: float
    exact: bool
    tC_sigma: np.ndarray = None
    tG_sigma: np.ndarray = None
    tH_sigma: np.ndarray = None
    tA_sigma: float = None

    def tQ(self, k: int, kappa2: float) -> float:
        """``Tr(Qtilde_k(kappa2) E[w_k w_k'])``."""
        return kappa2 * self.tC[k] + 2.0 * self.tG[k] + self.tH[k] / kappa2


@dataclass
class PosteriorField:
    mu: np.ndarray  # nK
    precision: sp.csc_matrix  # Sigma^{-1}
    factor: SparseCholesky
    theta: Hyperparameters
    n: int
    K: int
    traces: TraceSummaries | None = None

    def mu_task(self, k: int) -> np.ndarray:
        return self.mu[k * self.n:(k + 1) * self.n]

    def beta_mean(self, psi) -> np.ndarray:
        """``Psi mu_k`` for every task, N x K."""
        psi = psi.psi if isinstance(psi, Projector) else psi
        return np.column_stack([psi @ self.mu_task(k) for k in range(self.K)])


def _rademacher(rng, shape) -> np.ndarray:
    return rng.integers(0, 2, size=shape).astype(float) * 2.0 - 1.0


def hutchinson_trace(A, factor: SparseCholesky, ns: int = 50, seed=None, probes=None) -> float:
    """Estimate ``Tr(A Sigma)`` where ``factor`` factorizes ``Sigma^{-1}``.

    Draws ``V`` with +-1 entries, solves ``Sigma^{-1} P = V`` and returns
    ``Tr(P' A V) / ns``.
    """
    V = probes if probes is not None else _rademacher(np.random.default_rng(seed), (factor.n, ns))
    P = factor.solve(V)
    return float(np.sum(P * (A @ V)) / V.shape[1])


class SpatialModel:
    """Caches everything about one subject that does not depend on theta."""

    def __init__(self, inp: SubjectInput, backend: str | None = None):
        self.inp = inp
        self.n, self.K = inp.n, inp.K
        self.spde = SpdeOperator(inp.fem, backend=backend)
        fem = inp.fem
        comps = []
        for k in range(self.K):
            e = sp.csc_matrix(([1.0], ([k], [k])), shape=(self.K, self.K))
            comps += [sp.kron(e, fem.C, "csc"), sp.kron(e, fem.G, "csc"), sp.kron(e, fem.GCinvG, "csc")]
        comps.append(inp.A)
        self._sum = PatternSum(comps)
        self.backend = backend

    @cached_property
    def symbolic(self) -> Symbolic:
        return Symbolic(self.posterior_precision(Hyperparameters(np.ones(self.K), np.ones(self.K) / FOUR_PI, 1.0)),
                        backend=self.backend)

    def prior_weights(self, theta: Hyperparameters) -> list:
        w = []
        for k in range(self.K):
            s = 1.0 / (FOUR_PI * theta.phi[k])
            w += [s * theta.kappa2[k], 2.0 * s, s / theta.kappa2[k]]
        return w

    def posterior_precision(self, theta: Hyperparameters) -> sp.csc_matrix:
        return self._sum.combine(self.prior_weights(theta) + [1.0 / theta.sigma2])

    def prior_precision(self, theta: Hyperparameters) -> sp.csc_matrix:
        return self._sum.combine(self.prior_weights(theta) + [0.0])

    def posterior(self, theta: Hyperparameters) -> PosteriorField:
        prec = self.posterior_precision(theta)
        try:
            fac = self.symbolic.factor(prec)
        except NotPositiveDefiniteError as exc:
            raise EMError(f"posterior precision not SPD at theta={theta.to_dict()}") from exc
        mu = fac.solve(self.inp.b / theta.sigma2)
        return PosteriorField(mu, prec, fac, theta, self.n, self.K)

    # -- traces --------------------------------------------------------------------
    def _blocks(self, k):
        sl = slice(k * self.n, (k + 1) * self.n)
        return sl

    def compute_traces(self, post: PosteriorField, exact: bool | None = None,
                       ns: int = 50, seed=None) -> TraceSummaries:
        n, K = self.n, self.K
        fem, A = self.inp.fem, self.inp.A
        mats = (sp.csc_matrix(fem.C), fem.G, fem.GCinvG)
        if exact is None:
            exact = n * K <= EXACT_TRACE_MAX
        sig = np.zeros((3, K))
        if exact:
            Sigma = post.factor.solve(np.eye(n * K))
            Sigma = 0.5 * (Sigma + Sigma.T)
            for k in range(K):
                S = Sigma[self._blocks(k), self._blocks(k)]
                for j, M in enumerate(mats):
                    Mc = M.tocoo()
                    sig[j, k] = np.sum(Mc.data * S[Mc.row, Mc.col])
            Ac = A.tocoo()
            tA_sigma = float(np.sum(Ac.data * Sigma[Ac.row, Ac.col]))
        else:
            V = _rademacher(np.random.default_rng(seed), (n * K, ns))
            P = post.factor.solve(V)
            for k in range(K):
                sl = self._blocks(k)
                for j, M in enumerate(mats):
                    sig[j, k] = np.sum(P[sl] * (M @ V[sl])) / ns
            tA_sigma = float(np.sum(P * (A @ V)) / ns)
        quad = np.zeros((3, K))
        for k in range(K):
            m = post.mu_task(k)
            for j, M in enumerate(mats):
                quad[j, k] = m @ (M @ m)
        tA = tA_sigma + float(post.mu @ (A @ post.mu))
        tot = sig + quad
        return TraceSummaries(tot[0], tot[1], tot[2], tA, exact,
                              sig[0], sig[1], sig[2], tA_sigma)


def e_step(model: SpatialModel, theta: Hyperparameters, trace_seed=None,
           ns: int = 50, exact: bool | None = None) -> PosteriorField:
    """Posterior of ``w`` at ``theta`` plus the trace summaries the M-step needs."""
    post = model.posterior(theta)
    post.traces = model.compute_traces(post, exact=exact, ns=ns, seed=trace_seed)
    return post


# -- M-step ---------------------------------------------------------------------------

def update_sigma2(model: SpatialModel, post: PosteriorField) -> float:
    inp = model.inp
    tr = post.traces
    val = (inp.yty - 2.0 * post.mu @ inp.b + tr.tA) / (inp.T * inp.N)
    if val <= 0:
        if not tr.exact and model.n <= 500:
            tr = model.compute_traces(post, exact=True)
            post.traces = tr
            val = (inp.yty - 2.0 * post.mu @ inp.b + tr.tA) / (inp.T * inp.N)
        if val <= 0:
            raise EMError(f"non-positive sigma2 update ({val:.3g}); traces inconsistent")
    return float(val)


def update_phi(k: int, post: PosteriorField, kappa2: float | None = None,
               model: SpatialModel | None = None) -> float:
    """``Tr(Qtilde_k E[w_k w_k']) / (4 pi n)`` at the current kappa2."""
    kappa2 = post.theta.kappa2[k] if kappa2 is None else kappa2
    val = post.traces.tQ(k, kappa2) / (FOUR_PI * post.n)
    if val <= 0:
        if model is not None and not post.traces.exact and post.n <= 500:
            post.traces = model.compute_traces(post, exact=True)
            val = post.traces.tQ(k, kappa2) / (FOUR_PI * post.n)
        if val <= 0:
            raise EMError(f"non-positive phi update for task {k}")
    return float(val)


def kappa2_objective(spde: SpdeOperator, kappa2: float, phi: float, tC, tG, tH) -> float:
    """``0.5 log|Qtilde| - Tr(Qtilde E) / (8 pi phi)``."""
    tq = kappa2 * tC + 2.0 * tG + tH / kappa2
    return 0.5 * spde.logdet_qtilde(kappa2) - tq / (2.0 * FOUR_PI * phi)


def golden_section_max(f, lo: float, hi: float, tol: float):
    """Maximize ``f`` on ``[lo, hi]``; returns ``(x, f(x))`` of the best point seen."""
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (c, fc) if fc >= fd else (d, fd)


def maximize_log_kappa2(g, rtol: float = 1e-4, bounds=KAPPA2_BOUNDS):
    """Maximize ``g(log kappa2)``; returns ``(x, g(x))``.

    The objective can be bimodal, so the best cell of a fixed log grid is
    located first (cached log-determinants make repeat visits cheap) and
    refined by golden section to a bracket of width ``rtol``. A maximum on
    a bound widens the bracket once by 10x per side.
    """
    def search(lo, hi):
        xs = np.linspace(lo, hi, GRID_POINTS)
        i = int(np.argmax([g(x) for x in xs]))
        return golden_section_max(g, xs[max(i - 1, 0)], xs[min(i + 1, len(xs) - 1)], rtol)

    lo, hi = np.log(bounds[0]), np.log(bounds[1])
    x, fx = search(lo, hi)
    if min(x - lo, hi - x) <= 2 * rtol:
        lo, hi = lo - np.log(10.0), hi + np.log(10.0)
        x, fx = search(lo, hi)
        if min(x - lo, hi - x) <= 2 * rtol:
            warnings.warn(f"kappa2 optimum at search bound ({np.exp(x):.3g})", RuntimeWarning)
    return x, fx


def optimize_kappa2(spde: SpdeOperator, phi: float, tC: float, tG: float, tH: float,
                    current: float | None = None, rtol: float = 1e-4,
                    bounds=KAPPA2_BOUNDS) -> float:
    """kappa2 update for fixed ``phi``.

    When ``current`` beats the search result it is kept, which makes each
    M-step a monotone conditional maximization.
    """
    if phi <= 0:
        raise ValueError("phi must be positive")

    def g(x):
        return kappa2_objective(spde, np.exp(x), phi, tC, tG, tH)

    x, fx = maximize_log_kappa2(g, rtol, bounds)
    if current is not None and g(np.log(current)) > fx:
        return float(current)
    return float(np.exp(x))


# -- initialization ----------------------------------------------------------------

def init_hyperparameters(w_hat, resid_var, spde: SpdeOperator, tol: float = 1e-6,
                         max_alternations: int = 100, rtol: float = 1e-4) -> Hyperparameters:
    """Starting theta from classical estimates ``w_hat`` (n x K) on the mesh.

    Alternates ``phi = w'Qtilde w / (4 pi n)`` with the kappa2 search until
    both change by less than ``tol`` (relative). The alternation is started
    at the maximizer of the profile ``0.5 log|Qtilde| - (n/2) log w'Qtilde w``,
    which is its fixed point, so it usually stops after a step or two.
    """
    w_hat = np.asarray(w_hat, dtype=float)
    if w_hat.ndim == 1:
        w_hat = w_hat[:, None]
    n, K = w_hat.shape
    fem = spde.fem
    rv = np.asarray(resid_var, dtype=float)
    sigma2 = float(np.nanmean(rv))
    if not sigma2 > 0:
        sigma2 = 1.0
    kappa2 = np.ones(K)
    phi = np.ones(K)
    for k in range(K):
        w = w_hat[:, k]
        if not np.any(w):
            phi[k] = float(np.var(w)) + 1e-6
            continue
        tC, tG, tH = w @ (fem.C @ w), w @ (fem.G @ w), w @ (fem.GCinvG @ w)

        def profile(x, tC=tC, tG=tG, tH=tH):
            k2 = np.exp(x)
            return 0.5 * spde.logdet_qtilde(k2) - 0.5 * n * np.log(k2 * tC + 2.0 * tG + tH / k2)

        kap = float(np.exp(maximize_log_kappa2(profile, rtol)[0]))
        for _ in range(max_alternations):
            ph = (kap * tC + 2.0 * tG + tH / kap) / (FOUR_PI * n)
            kap_new = optimize_kappa2(spde, ph, tC, tG, tH, current=kap, rtol=rtol)
            ph_new = (kap_new * tC + 2.0 * tG + tH / kap_new) / (FOUR_PI * n)
            done = abs(kap_new - kap) <= tol * kap and abs(ph_new - ph) <= tol * ph
            kap = kap_new
            if done:
                break
        kappa2[k] = kap
        phi[k] = (kap * tC + 2.0 * tG + tH / kap) / (FOUR_PI * n)
    return Hyperparameters(kappa2, phi, sigma2)


def project_to_mesh(psi, beta, smoothing: float = 1e-3, fem: FemMatrices | None = None) -> np.ndarray:
    """Mesh coefficients ``w`` (n x K) with ``Psi w ~ beta``.

    The identity projector returns ``beta`` itself. Otherwise solves
    ``(Psi'Psi + lam (G + C/|C|)) w = Psi' beta`` with a small stiffness
    penalty ``lam`` so vertices without data are filled in smoothly instead
    of by a rough minimum-norm solution.
    """
    psi = sp.csr_matrix(psi.psi if isinstance(psi, Projector) else psi)
    beta = np.nan_to_num(np.asarray(beta, dtype=float))
    N, n = psi.shape
    if N == n and (psi != sp.identity(n)).nnz == 0:
        return beta.copy()
    from .linalg import factorize

    PtP = sp.csc_matrix(psi.T @ psi)
    if fem is not None:
        pen = fem.G + sp.diags(fem.c_diag / fem.c_diag.mean())
    else:
        pen = sp.identity(n)
    lam = smoothing * PtP.diagonal().mean() / max(pen.diagonal().mean(), 1e-300)
    fac = factorize(sp.csc_matrix(PtP + lam * pen))
    return np.column_stack([fac.solve(psi.T @ beta[:, k]) for k in range(beta.shape[1])])


# -- fixed point and fitting ----------------------------------------------------------

@dataclass
class EMOptions:
    epsilon: float = 1e-3
    max_iter: int = 100
    ns: int = 50
    seed: int = 0
    accelerate: bool = True
    exact_traces: bool | None = None  # None: exact when n*K <= 1500
    kappa_rtol: float = 1e-4
    log_metric: bool = False
    threads: int = 1
    backend: str | None = None


class EMFixedPoint:
    """``theta -> f(theta)``: one E-step followed by the M-step updates.

    Each call draws fresh probes seeded by ``(seed, call index)``.
    """

    def __init__(self, model: SpatialModel, options: EMOptions):
        self.model = model
        self.opt = options
        self.calls = 0

    def step(self, theta: Hyperparameters) -> Hyperparameters:
        seed = np.random.SeedSequence([self.opt.seed, 7, self.calls])
        self.calls += 1
        post = e_step(self.model, theta, trace_seed=seed, ns=self.opt.ns, exact=self.opt.exact_traces)
        sigma2 = update_sigma2(self.model, post)
        K = self.model.K
        phi = np.empty(K)
        kappa2 = np.empty(K)

        def task(k):
            ph = update_phi(k, post, model=self.model)
            tr = post.traces
            ka = optimize_kappa2(self.model.spde, ph, tr.tC[k], tr.tG[k], tr.tH[k],
                                 current=theta.kappa2[k], rtol=self.opt.kappa_rtol)
            return ph, ka

        if self.opt.threads > 1 and K > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(self.opt.threads) as ex:
                res = list(ex.map(task, range(K)))
        else:
            res = [task(k) for k in range(K)]
        for k, (ph, ka) in enumerate(res):
            phi[k], kappa2[k] = ph, ka
        return Hyperparameters(kappa2, phi, sigma2)

    def __call__(self, vec):
        return self.step(Hyperparameters.from_vector(vec)).to_vector()


def em_fixed_point(model: SpatialModel, theta: Hyperparameters, options: EMOptions | None = None,
                   call_index: int = 0) -> Hyperparameters:
    fp = EMFixedPoint(model, options or EMOptions())
    fp.calls = call_index
    return fp.step(theta)


@dataclass
class FitResult:
    theta_hat: Hyperparameters
    posterior: PosteriorField
    beta_mean: np.ndarray  # N x K
    history: list
    converged: bool
    iterations: int
    fevals: int
    timing: dict
    theta0: Hyperparameters
    classical: ClassicalFit
    method: str = "em"
    extra: dict = field(default_factory=dict)


def _valid_theta(vec) -> bool:
    return bool(np.all(np.isfinite(vec)) and np.all(vec > 0))


def fit_subject(inp: SubjectInput, options: EMOptions | None = None,
                model: SpatialModel | None = None) -> FitResult:
    """Classical GLM -> initial theta -> (SQUAREM-accelerated) EM -> final E-step."""
    opt = options or EMOptions()
    t0 = time.perf_counter()
    model = model or SpatialModel(inp, backend=opt.backend)
    cls = classical_glm(inp.y, inp.X)
    w_hat = project_to_mesh(inp.psi, cls.beta, fem=inp.fem)
    theta0 = init_hyperparameters(w_hat, cls.resid_var, model.spde, rtol=opt.kappa_rtol)
    t1 = time.perf_counter()

    fp = EMFixedPoint(model, opt)
    res: SquaremResult = squarem(
        fp, theta0.to_vector(), epsilon=opt.epsilon, max_iter=opt.max_iter,
        accelerate=opt.accelerate, valid=_valid_theta, log_metric=opt.log_metric,
    )
    t2 = time.perf_counter()
    theta_hat = Hyperparameters.from_vector(res.theta)
    post = model.posterior(theta_hat)
    beta = post.beta_mean(inp.psi)
    t3 = time.perf_counter()
    if not res.converged:
        log.warning("EM did not converge in %d iterations", res.iterations)
    return FitResult(
        theta_hat=theta_hat, posterior=post, beta_mean=beta, history=res.history,
        converged=res.converged, iterations=res.iterations, fevals=res.fevals,
        timing={"init": t1 - t0, "em": t2 - t1, "final": t3 - t2, "total": t3 - t0},
        theta0=theta0, classical=cls,
    )


# -- posterior draws ---------------------------------------------------------------------

def sample_posterior_beta(post: PosteriorField, psi, H: int, seed, batch: int = 250) -> np.ndarray:
    """Draws of ``beta_k = Psi w_k``; returns a K x H x N array."""
    psi = psi.psi if isinstance(psi, Projector) else sp.csr_matrix(psi)
    rng = np.random.default_rng(seed)
    n, K = post.n, post.K
    out = np.empty((K, H, psi.shape[0]))
    for start in range(0, H, batch):
        m = min(batch, H - start)
        z = rng.standard_normal((n * K, m))
        w = post.factor.solve_lt(z) + post.mu[:, None]
        for k in range(K):
            out[k, start:start + m] = (psi @ w[k * n:(k + 1) * n]).T
    return out


def posterior_sd(post: PosteriorField, psi, exact: bool | None = None, H: int = 1000, seed=0) -> np.ndarray:
    """Marginal posterior sd of ``beta`` (N x K), exact for small problems."""
    psi = psi.psi if isinstance(psi, Projector) else sp.csr_matrix(psi)
    n, K = post.n, post.K
    if exact is None:
        exact = n * K <= 4000
    if exact:
        out = np.empty((psi.shape[0], K))
        for k in range(K):
            rhs = np.zeros((n * K, psi.shape[0]))
            rhs[k * n:(k + 1) * n] = psi.T.toarray()
            S = post.factor.solve(rhs)[k * n:(k + 1) * n]
            out[:, k] = np.sqrt(np.einsum("vi,iv->v", psi.toarray(), S))
        return out
    draws = sample_posterior_beta(post, psi, H, seed)
    return draws.std(axis=1, ddof=1).T
