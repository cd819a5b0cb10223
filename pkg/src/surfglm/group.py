"""Group analysis: pooled hyperparameters, recomputed subject posteriors, contrasts."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .em import PosteriorField, SpatialModel, SubjectInput, sample_posterior_beta
from .inference import ExcursionResult, bh_reject, excursion_set
from .mesh import Projector
from .seeding import seed_sequence
from .spde import Hyperparameters

DEFAULT_H = 1000


def normalize_weights(weights, M: int) -> np.ndarray:
    if weights is None:
        return np.full(M, 1.0 / M)
    w = np.asarray(weights, dtype=float)
    if w.shape != (M,) or np.any(w < 0) or not w.sum() > 0:
        raise ValueError("weights must be M nonnegative numbers with a positive sum")
    return w / w.sum()


def length_weights(T_list) -> np.ndarray:
    """``lambda_m = T_m / sum T``."""
    T = np.asarray(T_list, dtype=float)
    return T / T.sum()


def combine_theta(thetas, weights=None, log_scale: bool = False) -> Hyperparameters:
    """Entrywise weighted average of subject hyperparameters."""
    thetas = list(thetas)
    if not thetas:
        raise ValueError("no subject hyperparameters")
    K = thetas[0].K
    if any(t.K != K for t in thetas):
        raise ValueError("subjects disagree on the number of tasks")
    lam = normalize_weights(weights, len(thetas))
    V = np.array([t.to_vector() for t in thetas])
    vec = np.exp(lam @ np.log(V)) if log_scale else lam @ V
    return Hyperparameters.from_vector(vec)


def recompute_posterior(model: SpatialModel | SubjectInput, theta_G: Hyperparameters) -> PosteriorField:
    """Subject posterior of ``w`` under the group hyperparameters (no traces)."""
    if isinstance(model, SubjectInput):
        model = SpatialModel(model)
    return model.posterior(theta_G)


@dataclass(frozen=True)
class Contrast:
    """Linear map from stacked subject/task fields to one group field.

    ``weights[m, k]`` multiplies task ``k`` of subject ``m``; applied as a
    weighted sum over the (M, K) axes, never as an explicit Kronecker matrix.
    """

    weights: np.ndarray  # M x K

    @property
    def M(self) -> int:
        return self.weights.shape[0]

    @property
    def K(self) -> int:
        return self.weights.shape[1]

    def apply(self, beta) -> np.ndarray:
        """``beta`` is either a flat ``(M*K*N,)`` vector (subject, task, location
        order), an ``(M, K, N)`` array, or ``(M, K, H, N)`` draws."""
        b = np.asarray(beta, dtype=float)
        if b.ndim == 1:
            if b.size % (self.M * self.K):
                raise ValueError("stacked length is not a multiple of M*K")
            b = b.reshape(self.M, self.K, -1)
        if b.shape[:2] != (self.M, self.K):
            raise ValueError(f"expected leading dims {(self.M, self.K)}, got {b.shape[:2]}")
        return np.tensordot(self.weights, b, axes=([0, 1], [0, 1]))

    __call__ = apply

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist()}


def build_contrast(M: int, K: int, weights=None, task: int = 0) -> Contrast:
    """Contrast over ``M`` subjects and ``K`` tasks.

    Without ``weights``, averages task ``task`` across subjects. ``weights``
    may be a length ``K*M`` vector in subject-major order or an M x K array.
    """
    if weights is None:
        w = np.zeros((M, K))
        w[:, task] = 1.0 / M
        return Contrast(w)
    w = np.asarray(weights, dtype=float)
    if w.size != M * K:
        raise ValueError(f"contrast needs {M * K} weights, got {w.size}")
    return Contrast(w.reshape(M, K))


@dataclass
class GroupModel:
    theta_G: Hyperparameters
    lam: np.ndarray
    subject_posteriors: list
    psis: list
    H: int = DEFAULT_H

    @classmethod
    def from_subjects(cls, models, thetas, weights=None, H: int = DEFAULT_H, log_scale: bool = False,
                      psis=None) -> "GroupModel":
        models = [m if isinstance(m, SpatialModel) else SpatialModel(m) for m in models]
        lam = normalize_weights(weights, len(models))
        theta_G = combine_theta(thetas, lam, log_scale)
        posts = [m.posterior(theta_G) for m in models]
        if psis is None:
            psis = [m.inp.psi for m in models]
        return cls(theta_G, lam, posts, psis, H)


@dataclass
class GroupResult:
    mean: np.ndarray  # contrast of posterior means, per location
    draw_mean: np.ndarray  # average of contrast draws
    excursions: dict = field(default_factory=dict)  # gamma -> ExcursionResult


def group_inference(group: GroupModel, contrast: Contrast, gammas=(0.0, 0.5, 1.0), alpha: float = 0.01,
                    seed: int = 0, H: int | None = None) -> GroupResult:
    """Sample every subject posterior, apply the contrast, threshold per gamma.

    Subject ``m`` draws from the stream ``(seed, sample, m)`` so results do
    not depend on evaluation order.
    """
    H = H or group.H
    M = len(group.subject_posteriors)
    if contrast.M != M:
        raise ValueError(f"contrast covers {contrast.M} subjects, model has {M}")
    acc = None
    means = []
    for m, (post, psi) in enumerate(zip(group.subject_posteriors, group.psis)):
        draws = sample_posterior_beta(post, psi, H, seed_sequence(seed, "sample", m))  # K x H x N
        part = np.tensordot(contrast.weights[m], draws, axes=(0, 0))
        acc = part if acc is None else acc + part
        means.append(post.beta_mean(psi).T)  # K x N
    mean = contrast.apply(np.stack(means))
    exc = {float(g): excursion_set(acc, g, alpha) for g in gammas}
    return GroupResult(mean, acc.mean(axis=0), exc)


# -- classical baseline ------------------------------------------------------------

@dataclass
class ClassicalGroupResult:
    estimate: np.ndarray
    se: np.ndarray
    df: int
    masks: dict


def classical_group(betas, ses, dfs, contrast: Contrast, gammas=(0.0, 0.5, 1.0), q: float = 0.01):
    """Fixed-effects combination of subject OLS fits.

    ``betas`` and ``ses`` are per-subject N x K arrays. The contrast
    estimate is ``sum c_mk beta_mk`` with variance ``sum c_mk^2 se_mk^2``
    and ``sum df_m`` degrees of freedom.
    """
    B = np.stack([np.asarray(b, float).T for b in betas])  # M x K x N
    S = np.stack([np.asarray(s, float).T for s in ses])
    est = contrast.apply(B)
    se = np.sqrt(np.tensordot(contrast.weights**2, S**2, axes=([0, 1], [0, 1])))
    df = int(np.sum(dfs))
    masks = {}
    from scipy import stats

    ok = np.isfinite(est) & np.isfinite(se) & (se > 0)
    for g in gammas:
        m = np.zeros(est.shape, bool)
        if ok.any():
            m[ok] = bh_reject(stats.t.sf((est[ok] - g) / se[ok], df), q)
        masks[float(g)] = m
    return ClassicalGroupResult(est, se, df, masks)


def stack_runs(inputs) -> SubjectInput:
    """Concatenate runs of one subject along time (same locations and mesh)."""
    inputs = list(inputs)
    if len(inputs) == 1:
        return inputs[0]
    first = inputs[0]
    y = np.concatenate([i.y for i in inputs], axis=0)
    if all(i.X.ndim == 2 for i in inputs):
        X = np.concatenate([i.X for i in inputs], axis=0)
    else:
        X = np.concatenate([i.X if i.X.ndim == 3 else np.broadcast_to(i.X, (i.N,) + i.X.shape)
                            for i in inputs], axis=1)
    return SubjectInput(y, X, first.psi, first.fem)


def as_projector(psi) -> sp.csr_matrix:
    return psi.psi if isinstance(psi, Projector) else sp.csr_matrix(psi)


__all__ = [
    "Contrast", "ClassicalGroupResult", "ExcursionResult", "GroupModel", "GroupResult",
    "build_contrast", "classical_group", "combine_theta", "group_inference", "length_weights",
    "recompute_posterior", "stack_runs",
]
