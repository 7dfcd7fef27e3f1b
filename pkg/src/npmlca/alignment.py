"""Post-hoc label-switching alignment at both levels.

Permutations are 0-based index arrays with the convention
``new class c = old class perm[c]``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from .estimator import FitResult, Posteriors
from .model import Dataset, Parameters, class_logits, logsumexp


@dataclass(frozen=True)
class Relabeling:
    perm1: tuple[int, ...]
    perm2: tuple[int, ...]

    def __post_init__(self):
        for name in ("perm1", "perm2"):
            p = tuple(int(v) for v in getattr(self, name))
            if sorted(p) != list(range(len(p))):
                raise ValueError(f"{name} is not a permutation: {p}")
            object.__setattr__(self, name, p)

    @property
    def switched(self) -> bool:
        return not (_is_identity(self.perm1) and _is_identity(self.perm2))

    @classmethod
    def identity(cls, L: int, M: int) -> "Relabeling":
        return cls(tuple(range(L)), tuple(range(M)))

    def inverse(self) -> "Relabeling":
        return Relabeling(tuple(np.argsort(self.perm1)), tuple(np.argsort(self.perm2)))

    def then(self, other: "Relabeling") -> "Relabeling":
        """Relabeling equivalent to applying ``self`` and then ``other``."""
        p1 = np.asarray(self.perm1)[list(other.perm1)]
        p2 = np.asarray(self.perm2)[list(other.perm2)]
        return Relabeling(tuple(p1), tuple(p2))


def _is_identity(p) -> bool:
    return all(i == v for i, v in enumerate(p))


def _best_permutation(cost) -> tuple[int, ...]:
    """Exhaustive search; ``itertools.permutations`` is lexicographic so ties keep the first."""
    n = cost.shape[0]
    best, best_cost = None, np.inf
    for perm in itertools.permutations(range(n)):
        total = cost[list(perm), range(n)].sum()
        if total < best_cost:
            best, best_cost = perm, total
    return best


def find_level1_permutation(est_crp, true_crp) -> tuple[int, ...]:
    """Permutation minimising the squared distance between CRP columns.

    Both arrays have the class on the last axis (``K x L`` or ``K x S x L``).
    ``cost[a, c]`` is the distance between estimated class ``a`` and true
    class ``c``.
    """
    est = np.asarray(est_crp, dtype=float)
    true = np.asarray(true_crp, dtype=float)
    if est.shape != true.shape:
        raise ValueError(f"shape mismatch: {est.shape} vs {true.shape}")
    L = est.shape[-1]
    e = est.reshape(-1, L)
    t = true.reshape(-1, L)
    cost = ((e[:, :, None] - t[:, None, :]) ** 2).sum(axis=0)
    return _best_permutation(cost)


def model_composition(params: Parameters, data: Dataset) -> np.ndarray:
    """``M x L`` level-1 class shares implied by ``params`` for each level-2 class."""
    eta = class_logits(params, data.x, data.z_rows)
    p = np.exp(eta - logsumexp(eta, axis=0))
    return p.mean(axis=1).T


def estimated_composition(fit: FitResult, data: Dataset) -> np.ndarray:
    """Mean marginal level-1 posterior over individuals of each level-2 class's modal sites.

    A level-2 class with no modal sites falls back to its model-implied composition.
    """
    M = fit.params.M
    comp = model_composition(fit.params, data)
    rows_w = fit.modal2[data.site]
    for m in range(M):
        sel = rows_w == m + 1
        if np.any(sel):
            comp[m] = fit.posteriors.c_marg[sel].mean(axis=0)
    return comp


def find_level2_permutation(est: FitResult, truth: Parameters, data: Dataset) -> tuple[int, ...]:
    """Match level-2 classes by composition; ``est`` must be aligned at level 1."""
    e = estimated_composition(est, data)
    t = model_composition(truth, data)
    cost = ((e[:, None, :] - t[None, :, :]) ** 2).sum(axis=2)
    return _best_permutation(cost)


def composition_margin(est: FitResult, truth: Parameters, data: Dataset) -> float:
    """Cost gap between the best and second-best level-2 matching (``M = 2``: swap vs identity)."""
    e = estimated_composition(est, data)
    t = model_composition(truth, data)
    cost = ((e[:, None, :] - t[None, :, :]) ** 2).sum(axis=2)
    totals = sorted(cost[list(p), range(len(p))].sum()
                    for p in itertools.permutations(range(cost.shape[0])))
    return float(totals[1] - totals[0]) if len(totals) > 1 else np.inf


def _rereference(block: np.ndarray, perm) -> np.ndarray:
    """Permute rows and re-express against the (new) last row as reference."""
    b = block[list(perm)]
    return b - b[-1:]


def relabel_parameters(params: Parameters, r: Relabeling) -> Parameters:
    p1, p2 = list(r.perm1), list(r.perm2)
    alpha = params.alpha[p2] - params.alpha[p2[0]]
    gamma0 = _rereference(params.gamma0[:, p2], p1)
    return replace(params, alpha=alpha, gamma0=gamma0,
                   gamma1=_rereference(params.gamma1, p1),
                   gamma2=_rereference(params.gamma2, p1),
                   beta=params.beta[:, :, p1])


def relabel(fit: FitResult, r: Relabeling) -> FitResult:
    """Apply a relabeling to every class-indexed part of a fit.

    Relabelings compose against the as-fitted result, so undoing one returns
    that result exactly.  Standard errors of re-referenced logits are not a
    permutation of the old ones; they are dropped when ``r`` switches labels.
    """
    if fit.base is not None:
        return relabel(fit.base, fit.applied.then(r))
    if not r.switched:
        return fit
    p1, p2 = list(r.perm1), list(r.perm2)
    post = fit.posteriors
    c_cond = post.c_cond[:, p2, :][:, :, p1]
    new_post = Posteriors(post.w_post[:, p2], c_cond, post.c_marg[:, p1], post.loglik)
    inv1 = np.argsort(p1)
    inv2 = np.argsort(p2)
    se = None if fit.se is None else np.full_like(fit.se, np.nan)
    return replace(fit, params=relabel_parameters(fit.params, r), posteriors=new_post,
                   modal1=inv1[fit.modal1 - 1] + 1, modal2=inv2[fit.modal2 - 1] + 1,
                   se=se, base=fit, applied=r)


def align(fit: FitResult, truth: Parameters, data: Dataset) -> tuple[FitResult, Relabeling]:
    """Align ``fit`` to ``truth``: level-1 by CRPs, then level-2 by composition."""
    M = fit.params.M
    perm1 = find_level1_permutation(fit.params.crp(), truth.crp())
    step1 = relabel(fit, Relabeling(perm1, tuple(range(M))))
    perm2 = find_level2_permutation(step1, truth, data)
    r = Relabeling(perm1, perm2)
    return relabel(fit, r), r
