"""Domain types and the exact log-likelihood of the conditional NP-MLCA model.

The model has two nested discrete latent variables. Site ``j`` belongs to a
level-2 class ``W_j = m`` with probability ``softmax(alpha)[m]``; individual
``i`` in site ``j`` belongs to level-1 class ``C_ij = c`` with probability

    softmax_c(gamma0[c, m] + gamma1[c] . x_ij + gamma2[c] . z_j)

and answers the ``K`` categorical indicators independently given ``c`` with
category probabilities ``softmax_s(beta[k, s, c])``.

Reference cells: ``alpha[0]``, row ``L-1`` of every gamma block and category
0 of every beta slice are fixed at zero.  Category codes and class labels are
1-based at the public surface and 0-based in arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np


def logsumexp(a: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:
    """Log-sum-exp along ``axis``; rows that are entirely ``-inf`` give ``-inf``."""
    a = np.asarray(a, dtype=float)
    mx = np.max(a, axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - mx), axis=axis, keepdims=True)) + mx
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    return out


class ModelError(ValueError):
    """Base class for invalid model inputs."""


class DimensionError(ModelError):
    def __init__(self, dimension: str, expected, got):
        self.dimension = dimension
        self.expected = expected
        self.got = got
        super().__init__(f"dimension mismatch in {dimension}: expected {expected}, got {got}")


class CategoryError(ModelError):
    def __init__(self, indicator: int, code, n_categories: int):
        self.indicator = indicator
        self.code = code
        super().__init__(
            f"indicator {indicator}: category code {code} outside 1..{n_categories}"
        )


class DataError(ModelError):
    pass


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ModelSpec:
    """Dimensions of a conditional NP-MLCA model."""

    n_categories: tuple[int, ...]
    L: int
    M: int
    P1: int = 0
    P2: int = 0

    def __post_init__(self):
        object.__setattr__(self, "n_categories", tuple(int(s) for s in self.n_categories))
        if len(self.n_categories) < 1:
            raise ModelError("need at least one indicator")
        if any(s < 2 for s in self.n_categories):
            raise ModelError(f"every indicator needs >= 2 categories, got {self.n_categories}")
        # L = 1 is allowed so the degenerate single-class model can be fit.
        if self.L < 1 or self.M < 1:
            raise ModelError(f"class counts must be positive, got L={self.L}, M={self.M}")
        if self.P1 < 0 or self.P2 < 0:
            raise ModelError("covariate counts must be non-negative")

    @classmethod
    def binary(cls, K: int, L: int, M: int, P1: int = 0, P2: int = 0) -> "ModelSpec":
        return cls((2,) * K, L, M, P1, P2)

    @property
    def K(self) -> int:
        return len(self.n_categories)

    @property
    def S(self) -> tuple[int, ...]:
        return self.n_categories

    @property
    def max_categories(self) -> int:
        return max(self.n_categories)

    def category_mask(self) -> np.ndarray:
        """Boolean ``K x Smax`` mask of categories that exist."""
        s = np.arange(self.max_categories)
        return s[None, :] < np.asarray(self.n_categories)[:, None]


@dataclass(frozen=True)
class Parameters:
    """Free parameters of the model, stored with explicit zero reference cells.

    Shapes: ``alpha (M,)``, ``gamma0 (L, M)``, ``gamma1 (L, P1)``,
    ``gamma2 (L, P2)``, ``beta (K, Smax, L)``.  Entries of ``beta`` beyond an
    indicator's category count are padding and ignored.
    """

    alpha: np.ndarray
    gamma0: np.ndarray
    gamma1: np.ndarray
    gamma2: np.ndarray
    beta: np.ndarray
    n_categories: tuple[int, ...]

    def __post_init__(self):
        S = tuple(int(s) for s in self.n_categories)
        object.__setattr__(self, "n_categories", S)
        alpha = _frozen(self.alpha)
        gamma0 = np.array(self.gamma0, dtype=float)
        L, M = gamma0.shape
        gamma1 = np.array(self.gamma1, dtype=float).reshape(L, -1)
        gamma2 = np.array(self.gamma2, dtype=float).reshape(L, -1)
        beta = np.array(self.beta, dtype=float)
        if alpha.shape != (M,):
            raise DimensionError("alpha", (M,), alpha.shape)
        if beta.shape != (len(S), max(S), L):
            raise DimensionError("beta", (len(S), max(S), L), beta.shape)
        # padding is zeroed so that equality and serialisation are canonical
        beta[~ModelSpec(S, L, M).category_mask()] = 0.0
        blocks = {"alpha": alpha, "gamma0": gamma0, "gamma1": gamma1,
                  "gamma2": gamma2, "beta": beta}
        for name, arr in blocks.items():
            if not np.all(np.isfinite(arr)):
                raise ModelError(f"non-finite entries in {name}")
        if alpha[0] != 0 or np.any(gamma0[-1] != 0) or np.any(gamma1[-1] != 0) \
                or np.any(gamma2[-1] != 0) or np.any(beta[:, 0, :] != 0):
            raise ModelError("reference cells must be exactly zero")
        for name in ("gamma0", "gamma1", "gamma2", "beta"):
            object.__setattr__(self, name, _frozen(blocks[name]))
        object.__setattr__(self, "alpha", alpha)

    @property
    def L(self) -> int:
        return self.gamma0.shape[0]

    @property
    def M(self) -> int:
        return self.gamma0.shape[1]

    @property
    def spec(self) -> ModelSpec:
        return ModelSpec(self.n_categories, self.L, self.M,
                         self.gamma1.shape[1], self.gamma2.shape[1])

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "Parameters":
        return cls(np.zeros(spec.M), np.zeros((spec.L, spec.M)),
                   np.zeros((spec.L, spec.P1)), np.zeros((spec.L, spec.P2)),
                   np.zeros((spec.K, spec.max_categories, spec.L)), spec.n_categories)

    @classmethod
    def from_probabilities(cls, level2_probs, gamma0, gamma1, gamma2, crp) -> "Parameters":
        """Build parameters from level-2 class probabilities and a CRP array.

        ``crp`` is either ``K x L`` (binary indicators, entries are
        ``P(Y_k = 1 | c)``) or ``K x S x L`` of full category probabilities.
        """
        pi = np.asarray(level2_probs, dtype=float)
        alpha = np.log(pi) - np.log(pi[0])
        crp = np.asarray(crp, dtype=float)
        if crp.ndim == 2:
            crp = np.stack([crp, 1.0 - crp], axis=1)
        with np.errstate(divide="ignore"):
            beta = np.log(crp) - np.log(crp[:, :1, :])
        S = tuple(int(n) for n in np.sum(crp.sum(axis=2) > 0, axis=1))
        beta[~np.isfinite(beta)] = 0.0
        return cls(alpha, gamma0, gamma1, gamma2, beta, S)

    # -- derived probabilities -------------------------------------------

    def log_crp(self) -> np.ndarray:
        """Log category probabilities ``K x Smax x L``; padding is ``-inf``."""
        mask = self.spec.category_mask()[:, :, None]
        b = np.where(mask, self.beta, -np.inf)
        return b - logsumexp(b, axis=1, keepdims=True)

    def crp(self) -> np.ndarray:
        """Category probabilities ``K x Smax x L`` (padding is 0)."""
        return np.exp(self.log_crp())

    def crp_matrix(self) -> np.ndarray:
        """``K x L`` matrix of ``P(Y_k = 1 | c)``, the binary CRP convention."""
        return self.crp()[:, 0, :]

    def level2_probs(self) -> np.ndarray:
        return np.exp(self.alpha - logsumexp(self.alpha))

    # -- free-parameter vector -------------------------------------------

    def to_vector(self) -> np.ndarray:
        spec = self.spec
        mask = spec.category_mask()
        parts = [self.alpha[1:], self.gamma0[:-1].ravel(), self.gamma1[:-1].ravel(),
                 self.gamma2[:-1].ravel()]
        free = mask.copy()
        free[:, 0] = False
        parts.append(self.beta[free].ravel())
        return np.concatenate(parts)

    @classmethod
    def from_vector(cls, vec, spec: ModelSpec) -> "Parameters":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (count_free_parameters(spec),):
            raise DimensionError("parameter vector", (count_free_parameters(spec),), vec.shape)
        L, M, P1, P2 = spec.L, spec.M, spec.P1, spec.P2
        pos = 0

        def take(n):
            nonlocal pos
            out = vec[pos:pos + n]
            pos += n
            return out

        alpha = np.concatenate([[0.0], take(M - 1)])
        gamma0 = np.zeros((L, M))
        gamma0[:-1] = take((L - 1) * M).reshape(L - 1, M)
        gamma1 = np.zeros((L, P1))
        gamma1[:-1] = take((L - 1) * P1).reshape(L - 1, P1)
        gamma2 = np.zeros((L, P2))
        gamma2[:-1] = take((L - 1) * P2).reshape(L - 1, P2)
        free = spec.category_mask()
        free[:, 0] = False
        beta = np.zeros((spec.K, spec.max_categories, L))
        beta[free] = take(int(free.sum()) * L).reshape(-1, L)
        return cls(alpha, gamma0, gamma1, gamma2, beta, spec.n_categories)


def free_parameter_names(spec: ModelSpec) -> list[str]:
    """Names of the free parameters in ``Parameters.to_vector`` order (1-based)."""
    L, M = spec.L, spec.M
    names = [f"alpha[{m + 1}]" for m in range(1, M)]
    names += [f"gamma0[{c + 1},{m + 1}]" for c in range(L - 1) for m in range(M)]
    names += [f"gamma1[{c + 1},{p + 1}]" for c in range(L - 1) for p in range(spec.P1)]
    names += [f"gamma2[{c + 1},{p + 1}]" for c in range(L - 1) for p in range(spec.P2)]
    names += [f"beta[{k + 1},{s + 1},{c + 1}]"
              for k, S in enumerate(spec.n_categories) for s in range(1, S) for c in range(L)]
    return names


@dataclass(frozen=True)
class Dataset:
    """Grouped observations, rows sorted so that each site is contiguous.

    ``y`` holds 1-based category codes (``N x K``), ``x`` level-1 covariates
    (``N x P1``), ``z`` one row of level-2 covariates per site (``J x P2``) and
    ``site`` the 0-based site index of each row.  ``true_c`` / ``true_w`` are
    optional 1-based memberships recorded by the simulator.
    """

    site_ids: tuple
    site: np.ndarray
    y: np.ndarray
    x: np.ndarray
    z: np.ndarray
    true_c: np.ndarray | None = None
    true_w: np.ndarray | None = None
    row_ids: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        site = np.asarray(self.site, dtype=np.int64)
        y = np.asarray(self.y, dtype=np.int64)
        if y.ndim != 2:
            raise DataError("y must be a 2-d array of category codes")
        N = y.shape[0]
        if N == 0:
            raise DataError("empty dataset")
        x = np.asarray(self.x, dtype=float).reshape(N, -1)
        J = len(self.site_ids)
        z = np.asarray(self.z, dtype=float).reshape(J, -1)
        if site.shape != (N,):
            raise DimensionError("site", (N,), site.shape)
        if np.any(np.diff(site) < 0) or site[0] != 0 or site[-1] != J - 1 \
                or np.any(np.diff(site) > 1):
            raise DataError("rows must be grouped by site with every site non-empty")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
            raise DataError("covariates must be finite")
        if np.any(y < 1):
            k = int(np.argwhere(y < 1)[0, 1])
            raise CategoryError(k + 1, int(y[:, k].min()), 0)
        object.__setattr__(self, "site_ids", tuple(self.site_ids))
        object.__setattr__(self, "site", _frozen(site, np.int64))
        object.__setattr__(self, "y", _frozen(y, np.int64))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "z", _frozen(z))
        if self.true_c is not None:
            object.__setattr__(self, "true_c", _frozen(self.true_c, np.int64))
            if self.true_c.shape != (N,):
                raise DimensionError("true_c", (N,), self.true_c.shape)
        if self.true_w is not None:
            object.__setattr__(self, "true_w", _frozen(self.true_w, np.int64))
            if self.true_w.shape != (J,):
                raise DimensionError("true_w", (J,), self.true_w.shape)
        rows = np.arange(N) if self.row_ids is None else self.row_ids
        object.__setattr__(self, "row_ids", _frozen(rows, np.int64))

    @classmethod
    def from_rows(cls, site_of_row: Sequence, y, x=None, z_of_row=None, true_c=None,
                  true_w: dict | None = None) -> "Dataset":
        """Build from flat per-row arrays; ``z_of_row`` must be constant per site.

        Sites are ordered by first appearance; rows keep their relative order.
        """
        site_of_row = list(site_of_row)
        N = len(site_of_row)
        order_ids = list(dict.fromkeys(site_of_row))
        index = {s: j for j, s in enumerate(order_ids)}
        site = np.array([index[s] for s in site_of_row], dtype=np.int64)
        perm = np.argsort(site, kind="stable")
        y = np.asarray(y)[perm]
        x = np.zeros((N, 0)) if x is None else np.asarray(x, dtype=float).reshape(N, -1)[perm]
        zr = np.zeros((N, 0)) if z_of_row is None else np.asarray(z_of_row, dtype=float).reshape(N, -1)
        J = len(order_ids)
        z = np.zeros((J, zr.shape[1]))
        for j in range(J):
            zj = zr[site == j]
            if np.any(zj != zj[0]):
                raise DataError(f"level-2 covariates vary within site {order_ids[j]!r}")
            z[j] = zj[0]
        tc = None if true_c is None else np.asarray(true_c)[perm]
        tw = None if true_w is None else np.array([true_w[s] for s in order_ids])
        return cls(tuple(order_ids), site[perm], y, x[...], z, tc, tw, row_ids=perm)

    @property
    def N(self) -> int:
        return self.y.shape[0]

    @property
    def J(self) -> int:
        return len(self.site_ids)

    @property
    def K(self) -> int:
        return self.y.shape[1]

    @cached_property
    def offsets(self) -> np.ndarray:
        """Row offsets of each site, length ``J + 1``."""
        return np.searchsorted(self.site, np.arange(self.J + 1))

    @cached_property
    def site_sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    @cached_property
    def z_rows(self) -> np.ndarray:
        return self.z[self.site]

    def onehot(self, n_categories: tuple[int, ...]) -> np.ndarray:
        """``N x sum(S)`` indicator matrix of responses, blocks ordered by indicator."""
        cache = self.__dict__.setdefault("_onehot", {})
        if n_categories not in cache:
            starts = np.concatenate([[0], np.cumsum(n_categories)[:-1]])
            out = np.zeros((self.N, int(sum(n_categories))))
            rows = np.arange(self.N)
            for k, s0 in enumerate(starts):
                out[rows, s0 + self.y[:, k] - 1] = 1.0
            out.setflags(write=False)
            cache[n_categories] = out
        return cache[n_categories]

    def validate(self, spec: ModelSpec) -> None:
        if self.K != spec.K:
            raise DimensionError("K (indicators)", spec.K, self.K)
        if self.x.shape[1] != spec.P1:
            raise DimensionError("P1 (level-1 covariates)", spec.P1, self.x.shape[1])
        if self.z.shape[1] != spec.P2:
            raise DimensionError("P2 (level-2 covariates)", spec.P2, self.z.shape[1])
        S = np.asarray(spec.n_categories)
        bad = self.y > S[None, :]
        if np.any(bad):
            i, k = np.argwhere(bad)[0]
            raise CategoryError(int(k) + 1, int(self.y[i, k]), int(S[k]))
        if self.true_c is not None and np.any((self.true_c < 1) | (self.true_c > spec.L)):
            raise DataError("true_c holds codes outside 1..L")
        if self.true_w is not None and np.any((self.true_w < 1) | (self.true_w > spec.M)):
            raise DataError("true_w holds codes outside 1..M")

    def subset(self, sites: Sequence[int]) -> "Dataset":
        """Dataset restricted to the given 0-based site indices (in that order)."""
        sites = list(sites)
        rows = np.concatenate([np.arange(self.offsets[j], self.offsets[j + 1]) for j in sites])
        new_site = np.repeat(np.arange(len(sites)), self.site_sizes[sites])
        return Dataset(
            tuple(self.site_ids[j] for j in sites), new_site, self.y[rows], self.x[rows],
            self.z[sites],
            None if self.true_c is None else self.true_c[rows],
            None if self.true_w is None else self.true_w[sites],
            row_ids=self.row_ids[rows],
        )


# -- likelihood -----------------------------------------------------------

def _check_params(data: Dataset, params: Parameters) -> None:
    data.validate(params.spec)


def class_logits(params: Parameters, x: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Membership logits as an ``L x N x M`` array for row-aligned ``x``, ``z``.

    Classes lead so that reductions over classes run over contiguous slabs.
    """
    return (params.gamma0[:, None, :]
            + (params.gamma1 @ x.T)[:, :, None]
            + (params.gamma2 @ z.T)[:, :, None])


def log_class_probs(params: Parameters, x: np.ndarray, z: np.ndarray) -> np.ndarray:
    """``log p(c | m, x, z)`` as an ``N x M x L`` array for row-aligned ``x``, ``z``."""
    eta = class_logits(params, x, z)
    return np.moveaxis(eta - logsumexp(eta, axis=0), 0, -1)


def class_membership_probs(params: Parameters, m: int, x=(), z=()) -> np.ndarray:
    """Level-1 class probabilities given level-2 class ``m`` (1-based)."""
    if not 1 <= m <= params.M:
        raise DimensionError("m (level-2 class)", f"1..{params.M}", m)
    x = np.asarray(x, dtype=float).ravel()
    z = np.asarray(z, dtype=float).ravel()
    if x.shape[0] != params.gamma1.shape[1]:
        raise DimensionError("x (level-1 covariates)", params.gamma1.shape[1], x.shape[0])
    if z.shape[0] != params.gamma2.shape[1]:
        raise DimensionError("z (level-2 covariates)", params.gamma2.shape[1], z.shape[0])
    eta = params.gamma0[:, m - 1] + params.gamma1 @ x + params.gamma2 @ z
    return np.exp(eta - logsumexp(eta))


def response_loglik(y, params: Parameters, c: int) -> float:
    """``sum_k log P(Y_k = y_k | C = c)`` for one response row (1-based codes)."""
    y = np.asarray(y, dtype=np.int64).ravel()
    S = params.n_categories
    if y.shape[0] != len(S):
        raise DimensionError("y (indicators)", len(S), y.shape[0])
    for k, (code, s) in enumerate(zip(y, S)):
        if not 1 <= code <= s:
            raise CategoryError(k + 1, int(code), s)
    if not 1 <= c <= params.L:
        raise DimensionError("c (level-1 class)", f"1..{params.L}", c)
    lc = params.log_crp()
    return float(lc[np.arange(len(S)), y - 1, c - 1].sum())


def response_loglik_matrix(data: Dataset, params: Parameters) -> np.ndarray:
    """``N x L`` matrix of ``log P(y_i | C = c)``."""
    lc = params.log_crp()[params.spec.category_mask()]
    return data.onehot(params.n_categories) @ lc


def joint_log_terms(data: Dataset, params: Parameters):
    """Log-domain building blocks shared by the likelihood and the E-step.

    Returns ``(log_joint, row_m, site_m)`` where ``log_joint[c, i, m]`` is
    ``log p(c | m, x, z) + log P(y_i | c)`` (classes first), ``row_m[i, m]`` is
    its log-sum-exp over classes and ``site_m[j, m] = log pi_m + sum_{i in j}
    row_m[i, m]``.
    """
    eta = class_logits(params, data.x, data.z_rows)
    log_joint = (eta - logsumexp(eta, axis=0)
                 + response_loglik_matrix(data, params).T[:, :, None])
    row_m = logsumexp(log_joint, axis=0)
    log_pi = params.alpha - logsumexp(params.alpha)
    site_m = np.add.reduceat(row_m, data.offsets[:-1], axis=0) + log_pi[None, :]
    return log_joint, row_m, site_m


def group_loglik(data: Dataset, params: Parameters) -> np.ndarray:
    """Per-site log-likelihood contributions (length ``J``)."""
    _check_params(data, params)
    return logsumexp(joint_log_terms(data, params)[2], axis=1)


def total_loglik(data: Dataset, params: Parameters) -> float:
    return float(group_loglik(data, params).sum())


# -- fit statistics -------------------------------------------------------

def count_free_parameters(spec: ModelSpec) -> int:
    L, M = spec.L, spec.M
    return ((M - 1) + (L - 1) * M + (L - 1) * spec.P1 + (L - 1) * spec.P2
            + sum(s - 1 for s in spec.n_categories) * L)


def information_criteria(loglik: float, p: int, N: int) -> tuple[float, float]:
    """(AIC, BIC); BIC uses the number of level-1 units ``N``."""
    if p < 1 or N < 1:
        raise ModelError("need p >= 1 and N >= 1")
    return -2.0 * loglik + 2.0 * p, -2.0 * loglik + p * np.log(N)


def relative_entropy(post, L: int | None = None) -> float:
    """Relative entropy ``1 - sum -p log p / (N log L)`` of marginal posteriors."""
    p = np.asarray(post, dtype=float)
    N, Lp = p.shape
    L = Lp if L is None else L
    if L < 2:
        return 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    return float(1.0 + plogp.sum() / (N * np.log(L)))
