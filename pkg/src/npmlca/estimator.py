"""Maximum-likelihood estimation by (generalised) EM with random starts."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .model import (
    DataError,
    Dataset,
    ModelSpec,
    Parameters,
    count_free_parameters,
    information_criteria,
    joint_log_terms,
    logsumexp,
    relative_entropy,
)

log = logging.getLogger(__name__)

_PROB_FLOOR = 1e-300


@dataclass(frozen=True)
class Posteriors:
    """E-step output.

    ``w_post`` is ``J x M``, ``c_cond`` is ``N x M x L`` (class posterior given
    the site's level-2 class) and ``c_marg`` is ``N x L``.
    """

    w_post: np.ndarray
    c_cond: np.ndarray
    c_marg: np.ndarray
    loglik: float


@dataclass(frozen=True)
class FitOptions:
    n_starts: int = 20
    n_refine: int = 5
    burn_in: int = 30
    tol: float = 1e-7
    max_iter: int = 1000
    seed: int = 0
    compute_se: bool = True
    crp_init_range: float = 2.0
    class_init_range: float = 1.0
    # user-supplied starting values, tried in addition to the random starts
    start_values: tuple = ()
    trace: bool = False


@dataclass(frozen=True)
class FitResult:
    params: Parameters
    loglik: float
    se: np.ndarray
    posteriors: Posteriors
    converged: bool
    iterations: int
    n_starts_used: int
    modal1: np.ndarray
    modal2: np.ndarray
    fit_stats: dict
    trace: tuple = ()
    diagnostics: dict = field(default_factory=dict)
    # set by alignment.relabel: the as-fitted result and the permutation applied to it
    base: "FitResult | None" = field(default=None, repr=False, compare=False)
    applied: object = field(default=None, repr=False, compare=False)

    @property
    def se_available(self) -> bool:
        return self.se is not None and bool(np.all(np.isfinite(self.se)))


# -- E-step ---------------------------------------------------------------

def e_step(data: Dataset, params: Parameters) -> Posteriors:
    log_joint, row_m, site_m = joint_log_terms(data, params)
    site_ll = logsumexp(site_m, axis=1, keepdims=True)
    w_post = np.exp(site_m - site_ll)
    c_lnm = np.exp(log_joint - row_m)
    w_rows = w_post[data.site]
    c_marg = sum(c_lnm[:, :, m] * w_rows[:, m] for m in range(w_post.shape[1]))
    # c_cond is exposed as an N x M x L view of the class-first array
    return Posteriors(w_post, np.moveaxis(c_lnm, 0, -1), c_marg.T, float(site_ll.sum()))


def _weights(data: Dataset, post: Posteriors) -> np.ndarray:
    """Complete-data weights ``w[j(i), m] * c_cond[i, m, c]`` as ``L x (N*M)``."""
    c_lnm = np.moveaxis(post.c_cond, -1, 0)
    return (c_lnm * post.w_post[data.site][None]).reshape(c_lnm.shape[0], -1)


# -- M-step ---------------------------------------------------------------

def _design(data: Dataset, M: int) -> np.ndarray:
    """``(N*M) x D`` design: level-2 class indicator, x and z for every (i, m)."""
    N = data.N
    onehot = np.broadcast_to(np.eye(M)[None], (N, M, M))
    x = np.broadcast_to(data.x[:, None, :], (N, M, data.x.shape[1]))
    z = np.broadcast_to(data.z_rows[:, None, :], (N, M, data.z.shape[1]))
    return np.concatenate([onehot, x, z], axis=2).reshape(N * M, -1)


def _pack_gamma(params: Parameters) -> np.ndarray:
    """``(L-1) x D`` coefficient matrix of the membership model."""
    return np.concatenate([params.gamma0, params.gamma1, params.gamma2], axis=1)[:-1]


def _unpack_gamma(theta: np.ndarray, params: Parameters) -> Parameters:
    M, P1 = params.M, params.gamma1.shape[1]
    full = np.vstack([theta, np.zeros((1, theta.shape[1]))])
    return replace(params, gamma0=full[:, :M], gamma1=full[:, M:M + P1],
                   gamma2=full[:, M + P1:])


def membership_objective(theta: np.ndarray, F: np.ndarray, r: np.ndarray) -> float:
    """Weighted multinomial-logit objective ``sum r[c, row] log p(c | row)``.

    ``F`` is the ``rows x D`` design and ``r`` the ``L x rows`` weights.
    """
    eta = np.vstack([theta, np.zeros((1, theta.shape[1]))]) @ F.T
    logp = eta - logsumexp(eta, axis=0)
    return float(np.sum(r * logp))


def membership_gradient_hessian(theta: np.ndarray, F: np.ndarray, r: np.ndarray):
    """Analytic gradient ``(L-1) x D`` and Hessian ``(L-1)D x (L-1)D``."""
    eta = np.vstack([theta, np.zeros((1, theta.shape[1]))]) @ F.T
    p = np.exp(eta - logsumexp(eta, axis=0))[:-1]
    R = r.sum(axis=0)
    Rp = R * p
    grad = (r[:-1] - Rp) @ F
    Lm1, D = theta.shape
    H = np.zeros((Lm1, D, Lm1, D))
    for a in range(Lm1):
        for b in range(a, Lm1):
            wab = Rp[a] * ((a == b) - p[b])
            block = -(F.T * wab) @ F
            H[a, :, b, :] = block
            H[b, :, a, :] = block.T
    return grad, H.reshape(Lm1 * D, Lm1 * D)


def _gamma_step(theta, F, r, max_halvings=40):
    """One damped Newton step; falls back to gradient ascent if the Hessian is singular."""
    q0 = membership_objective(theta, F, r)
    grad, H = membership_gradient_hessian(theta, F, r)
    g = grad.ravel()
    fallback = False
    try:
        chol = np.linalg.cholesky(-H)
        step = np.linalg.solve(chol.T, np.linalg.solve(chol, g))
    except np.linalg.LinAlgError:
        fallback = True
        step = g / max(1.0, float(np.abs(g).max()))
    step = step.reshape(theta.shape)
    t = 1.0
    for _ in range(max_halvings):
        cand = theta + t * step
        if np.all(np.isfinite(cand)) and membership_objective(cand, F, r) >= q0:
            return cand, fallback
        t *= 0.5
    return theta, fallback


def _category_counts(data: Dataset, spec: ModelSpec, weights: np.ndarray) -> np.ndarray:
    """Posterior-weighted category counts ``K x Smax x L`` (padding is 0)."""
    counts = np.zeros((spec.K, spec.max_categories, spec.L))
    counts[spec.category_mask()] = data.onehot(spec.n_categories).T @ weights
    return counts


def _m_step(data: Dataset, post: Posteriors, params: Parameters, F=None):
    spec = params.spec
    w = np.maximum(post.w_post.mean(axis=0), _PROB_FLOOR)
    alpha = np.log(w) - np.log(w[0])

    counts = np.maximum(_category_counts(data, spec, post.c_marg), _PROB_FLOOR)
    beta = np.log(counts) - np.log(counts[:, :1, :])

    params = replace(params, alpha=alpha, beta=beta)
    if spec.L > 1:
        if F is None:
            F = _design(data, spec.M)
        r = _weights(data, post)
        theta, fallback = _gamma_step(_pack_gamma(params), F, r)
        params = _unpack_gamma(theta, params)
    else:
        fallback = False
    return params, fallback


def m_step(data: Dataset, post: Posteriors, params: Parameters) -> Parameters:
    """Closed-form updates for alpha and beta, one damped Newton step for gamma."""
    return _m_step(data, post, params)[0]


# -- EM driver ------------------------------------------------------------

def random_start(spec: ModelSpec, rng: np.random.Generator, crp_range=2.0,
                 class_range=1.0) -> Parameters:
    p = Parameters.zeros(spec)
    alpha = np.concatenate([[0.0], rng.uniform(-class_range, class_range, spec.M - 1)])
    gamma0 = np.zeros((spec.L, spec.M))
    gamma0[:-1] = rng.uniform(-class_range, class_range, (spec.L - 1, spec.M))
    beta = rng.uniform(-crp_range, crp_range, p.beta.shape)
    beta[:, 0, :] = 0.0
    return replace(p, alpha=alpha, gamma0=gamma0, beta=beta)


@dataclass
class _Run:
    params: Parameters
    post: Posteriors
    iterations: int = 0
    converged: bool = False
    fallbacks: int = 0
    trace: list = field(default_factory=list)


def _iterate(data: Dataset, run: _Run, n_iter: int, tol: float, F, keep_trace: bool) -> _Run:
    ll = run.post.loglik
    for _ in range(n_iter):
        params, fb = _m_step(data, run.post, run.params, F)
        post = e_step(data, params)
        run.params, run.post = params, post
        run.iterations += 1
        run.fallbacks += fb
        if keep_trace:
            run.trace.append(post.loglik)
        if abs(post.loglik - ll) < tol * abs(ll):
            run.converged = True
            break
        ll = post.loglik
    return run


def fit(data: Dataset, spec: ModelSpec, options: FitOptions = FitOptions()) -> FitResult:
    """Multi-start EM fit.

    Every start (random ones plus ``options.start_values``) runs
    ``burn_in`` iterations; the best ``n_refine`` by log-likelihood are then
    iterated to convergence and the best of those is returned.
    """
    if data.N == 0:
        raise DataError("empty dataset")
    data.validate(spec)
    rng = np.random.default_rng(options.seed)
    starts = [random_start(spec, rng, options.crp_init_range, options.class_init_range)
              for _ in range(options.n_starts)]
    starts += list(options.start_values)
    if not starts:
        raise ValueError("no starting values")
    F = _design(data, spec.M) if spec.L > 1 else None

    runs = []
    for p0 in starts:
        run = _Run(p0, e_step(data, p0))
        if options.trace:
            run.trace.append(run.post.loglik)
        runs.append(_iterate(data, run, options.burn_in, options.tol, F, options.trace))
    # stable sort keeps start order on exact ties
    order = sorted(range(len(runs)), key=lambda i: -runs[i].post.loglik)
    best = None
    for i in order[:max(1, options.n_refine)]:
        run = runs[i]
        if not run.converged:
            _iterate(data, run, options.max_iter - run.iterations, options.tol, F, options.trace)
        if best is None or run.post.loglik > best.post.loglik:
            best = run
    if not best.converged:
        log.warning("EM did not converge in %d iterations", options.max_iter)

    se = standard_errors(data, best.params) if options.compute_se else None
    return _result(data, best, se, len(starts))


def _result(data: Dataset, run: _Run, se, n_starts: int) -> FitResult:
    spec = run.params.spec
    post = run.post
    modal1, modal2 = classify(post)
    p = count_free_parameters(spec)
    aic, bic = information_criteria(post.loglik, p, data.N)
    stats_ = {"free_parameters": p, "loglik": post.loglik, "aic": aic, "bic": bic,
              "entropy": relative_entropy(post.c_marg, spec.L), "N": data.N, "J": data.J}
    return FitResult(run.params, post.loglik, se, post, run.converged, run.iterations,
                     n_starts, modal1, modal2, stats_, tuple(run.trace),
                     {"newton_fallbacks": run.fallbacks})


# -- derivatives and standard errors --------------------------------------

def loglik_gradient(data: Dataset, params: Parameters) -> np.ndarray:
    """Analytic score of ``total_loglik`` in ``Parameters.to_vector`` order.

    Uses the identity that the observed-data score equals the posterior
    expectation of the complete-data score.
    """
    spec = params.spec
    post = e_step(data, params)
    pi = params.level2_probs()
    g_alpha = (post.w_post - pi[None, :]).sum(axis=0)[1:]
    if spec.L > 1:
        F = _design(data, spec.M)
        r = _weights(data, post)
        g_gamma, _ = membership_gradient_hessian(_pack_gamma(params), F, r)
        M, P1 = spec.M, spec.P1
        g0 = g_gamma[:, :M].ravel()
        g1 = g_gamma[:, M:M + P1].ravel()
        g2 = g_gamma[:, M + P1:].ravel()
    else:
        g0 = g1 = g2 = np.zeros(0)
    crp = params.crp()
    counts = _category_counts(data, spec, post.c_marg)
    g_beta = counts - crp * counts.sum(axis=1, keepdims=True)
    free = spec.category_mask()
    free[:, 0] = False
    return np.concatenate([g_alpha, g0, g1, g2, g_beta[free].ravel()])


def fd_steps(theta: np.ndarray, rel: float = 1e-4, floor: float = 1e-5) -> np.ndarray:
    return np.maximum(rel * np.abs(theta), floor)


def numerical_hessian(data: Dataset, params: Parameters, rel_step: float = 1e-4,
                      abs_floor: float = 1e-5, symmetrize: bool = True) -> np.ndarray:
    """Central-difference Hessian of ``total_loglik`` over the free parameters.

    Columns are central differences of the analytic score, which keeps the
    round-off far below that of second differences of the likelihood itself.
    """
    spec = params.spec
    theta = params.to_vector()
    h = fd_steps(theta, rel_step, abs_floor)
    n = theta.size
    H = np.empty((n, n))
    for a in range(n):
        tp = theta.copy()
        tm = theta.copy()
        tp[a] += h[a]
        tm[a] -= h[a]
        gp = loglik_gradient(data, Parameters.from_vector(tp, spec))
        gm = loglik_gradient(data, Parameters.from_vector(tm, spec))
        H[:, a] = (gp - gm) / (2.0 * h[a])
    if symmetrize:
        H = 0.5 * (H + H.T)
    return H


def standard_errors(data: Dataset, params: Parameters) -> np.ndarray:
    """Observed-information standard errors; all ``nan`` if the information is not PD."""
    H = numerical_hessian(data, params)
    info = -H
    try:
        chol = np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        log.warning("observed information is not positive definite; SEs unavailable")
        return np.full(H.shape[0], np.nan)
    inv_chol = np.linalg.inv(chol)
    var = np.sum(inv_chol ** 2, axis=0)
    return np.sqrt(var)


# -- classification and tests ---------------------------------------------

def classify(post: Posteriors) -> tuple[np.ndarray, np.ndarray]:
    """Modal level-1 and level-2 assignments (1-based); ties go to the lowest class."""
    return np.argmax(post.c_marg, axis=1) + 1, np.argmax(post.w_post, axis=1) + 1


@dataclass(frozen=True)
class WaldResult:
    estimate: np.ndarray
    se: np.ndarray
    z: np.ndarray
    p: np.ndarray
    odds_ratio: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    significant: np.ndarray
    available: np.ndarray


def wald_tests(estimates, se, alpha: float = 0.05) -> WaldResult:
    """Two-sided Wald tests of logit-scale slopes, reported as odds ratios."""
    est = np.atleast_1d(np.asarray(estimates, dtype=float))
    se = np.atleast_1d(np.asarray(se, dtype=float))
    ok = np.isfinite(se) & (se > 0)
    safe = np.where(ok, se, np.nan)
    z = est / safe
    p = 2.0 * stats.norm.sf(np.abs(z))
    crit = stats.norm.isf(alpha / 2.0)
    return WaldResult(est, se, z, p, np.exp(est), np.exp(est - crit * safe),
                      np.exp(est + crit * safe), ok & (p < alpha), ok)


def significance_stars(p: float) -> str:
    if not np.isfinite(p):
        return ""
    return "***" if p < 0.001 else "**" if p < 0.01 else "*" if p < 0.05 else ""
