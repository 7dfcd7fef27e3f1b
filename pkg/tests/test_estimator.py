import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from conftest import random_dataset, random_parameters
from oracles import brute_force_posteriors, central_gradient
from npmlca.alignment import Relabeling, relabel_parameters
from npmlca.estimator import (
    FitOptions,
    Posteriors,
    _design,
    _pack_gamma,
    _weights,
    classify,
    e_step,
    fit,
    loglik_gradient,
    m_step,
    membership_gradient_hessian,
    membership_objective,
    numerical_hessian,
    significance_stars,
    standard_errors,
    wald_tests,
)
from npmlca.model import Dataset, ModelError, ModelSpec, Parameters, total_loglik
from npmlca.simulator import Condition, build_true_parameters, generate_dataset


def _check_normalised(post):
    for arr in (post.w_post, post.c_cond, post.c_marg):
        assert np.all((arr >= 0) & (arr <= 1))
        np.testing.assert_allclose(arr.sum(axis=-1), 1.0, atol=1e-10)


# -- E-step ----------------------------------------------------------------

def test_e_step_single_level2_class(rng):
    spec = ModelSpec((2, 3), 3, 1, 1, 0)
    p = random_parameters(spec, rng)
    data = random_dataset(spec, rng, [3, 5])
    post = e_step(data, p)
    np.testing.assert_array_equal(post.w_post, 1.0)
    np.testing.assert_allclose(post.c_marg, post.c_cond[:, 0, :], atol=1e-15)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_e_step_matches_enumerated_posteriors(seed):
    rng = np.random.default_rng(seed)
    spec = ModelSpec(tuple(rng.integers(2, 4, 2)), int(rng.integers(2, 4)), 2, 1, 1)
    p = random_parameters(spec, rng)
    data = random_dataset(spec, rng, rng.integers(1, 4, 2))
    post = e_step(data, p)
    w, c = brute_force_posteriors(data, p)
    np.testing.assert_allclose(post.w_post, w, atol=1e-12)
    np.testing.assert_allclose(post.c_marg, c, atol=1e-12)
    _check_normalised(post)


def test_modal_site_class_at_truth():
    # 600 sites of size 60 at quality 0.9
    cond = Condition(12, 0.9, 150, 60, (1, 1), (1, 1))
    truth = build_true_parameters(cond)
    hits = total = 0
    for seed in range(4):
        data = generate_dataset(cond, truth, 1000 + seed)
        _, modal2 = classify(e_step(data, truth))
        hits += int(np.sum(modal2 == data.true_w))
        total += data.J
    assert hits / total >= 0.99


# -- M-step ----------------------------------------------------------------

def _degenerate_posteriors(data, spec):
    c = np.eye(spec.L)[data.true_c - 1]
    w = np.eye(spec.M)[data.true_w - 1]
    return Posteriors(w, np.repeat(c[:, None, :], spec.M, axis=1), c, 0.0)


def test_m_step_recovers_empirical_crps(rng):
    spec = ModelSpec((2, 3, 2), 2, 2)
    truth = random_parameters(spec, rng, scale=0.5)
    sizes = [20, 25, 30]
    data = random_dataset(spec, rng, sizes)
    data = Dataset(data.site_ids, data.site, data.y, data.x, data.z,
                   true_c=rng.integers(1, 3, data.N), true_w=np.array([1, 2, 1]))
    new = m_step(data, _degenerate_posteriors(data, spec), truth)
    crp = new.crp()
    for k, S in enumerate(spec.n_categories):
        for c in range(spec.L):
            rows = data.y[data.true_c == c + 1, k]
            emp = np.bincount(rows - 1, minlength=S) / rows.size
            np.testing.assert_allclose(crp[k, :S, c], emp, atol=1e-12)
    np.testing.assert_allclose(new.level2_probs(), [2 / 3, 1 / 3], atol=1e-12)


def test_m_step_uniform_posteriors_make_classes_identical(rng):
    spec = ModelSpec((2, 4), 3, 2)
    p = random_parameters(spec, rng)
    data = random_dataset(spec, rng, [6, 6])
    u = np.full((data.N, 3), 1 / 3)
    post = Posteriors(np.full((2, 2), 0.5), np.full((data.N, 2, 3), 1 / 3), u, 0.0)
    beta = m_step(data, post, p).beta
    for c in (1, 2):
        np.testing.assert_allclose(beta[:, :, c], beta[:, :, 0], atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_membership_gradient_and_hessian_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    spec = ModelSpec.binary(2, int(rng.integers(2, 5)), 2, 1, 1)
    p = random_parameters(spec, rng, scale=0.8)
    data = random_dataset(spec, rng, [5, 4, 6])
    F = _design(data, spec.M)
    r = _weights(data, e_step(data, p))
    theta = _pack_gamma(p)
    grad, H = membership_gradient_hessian(theta, F, r)

    def obj(v):
        return membership_objective(v.reshape(theta.shape), F, r)

    fd = central_gradient(obj, theta.ravel(), h=1e-5)
    assert np.max(np.abs(grad.ravel() - fd)) <= 1e-5 * max(1.0, np.max(np.abs(fd)))

    def g(v):
        return membership_gradient_hessian(v.reshape(theta.shape), F, r)[0].ravel()

    fd_h = np.column_stack([central_gradient(lambda v, i=i: g(v)[i], theta.ravel(), h=1e-5)
                            for i in range(theta.size)]).T
    assert np.max(np.abs(H - fd_h)) <= 1e-5 * max(1.0, np.max(np.abs(fd_h)))


def test_loglik_gradient_matches_finite_differences(rng):
    spec = ModelSpec((2, 3, 2), 3, 2, 1, 1)
    p = random_parameters(spec, rng)
    data = random_dataset(spec, rng, [4, 6, 3])
    fd = central_gradient(lambda v: total_loglik(data, Parameters.from_vector(v, spec)),
                          p.to_vector(), h=1e-6)
    g = loglik_gradient(data, p)
    assert np.max(np.abs(g - fd)) <= 1e-5 * max(1.0, np.max(np.abs(fd)))


# -- fitting ---------------------------------------------------------------

def test_fit_single_class_closed_form(rng):
    spec = ModelSpec((2, 3), 1, 1)
    data = random_dataset(spec, rng, [40, 35])
    res = fit(data, spec, FitOptions(n_starts=3, n_refine=1, seed=1))
    assert res.converged
    crp = res.params.crp()
    for k, S in enumerate(spec.n_categories):
        emp = np.bincount(data.y[:, k] - 1, minlength=S) / data.N
        np.testing.assert_allclose(crp[k, :S, 0], emp, atol=1e-10)
    direct = sum(np.sum(np.log(crp[k, data.y[:, k] - 1, 0])) for k in range(2))
    assert res.loglik == pytest.approx(direct, abs=1e-9)


def test_em_trace_is_non_decreasing(rng):
    spec = ModelSpec.binary(5, 3, 2, 1, 1)
    truth = random_parameters(spec, rng)
    data = random_dataset(spec, rng, [15] * 8)
    res = fit(data, spec, FitOptions(n_starts=4, n_refine=2, seed=3, trace=True,
                                     compute_se=False))
    tr = np.array(res.trace)
    assert tr.size > 2
    assert np.all(np.diff(tr) >= -1e-8)
    assert res.loglik == pytest.approx(total_loglik(data, res.params), abs=1e-8)
    del truth


def test_fit_is_deterministic_given_seed(rng):
    spec = ModelSpec.binary(4, 2, 2, 1, 0)
    data = random_dataset(spec, rng, [10] * 6)
    opts = FitOptions(n_starts=3, n_refine=2, seed=11, compute_se=False)
    a, b = fit(data, spec, opts), fit(data, spec, opts)
    np.testing.assert_array_equal(a.params.to_vector(), b.params.to_vector())
    assert a.loglik == b.loglik


def test_fit_rejects_mismatched_data(rng):
    spec = ModelSpec.binary(4, 2, 2)
    data = random_dataset(ModelSpec.binary(3, 2, 2), rng, [5])
    with pytest.raises(ModelError):
        fit(data, spec, FitOptions(n_starts=1))


def test_fit_from_permuted_start_gives_permuted_solution():
    cond = Condition(6, 0.8, 50, 30, (1.5, 3), (1, 1))
    truth = build_true_parameters(cond)
    data = generate_dataset(cond, truth, 5)
    start = replace(truth)
    r = Relabeling((2, 0, 1), (1, 0))
    opts = FitOptions(n_starts=0, n_refine=1, compute_se=False)
    a = fit(data, truth.spec, replace(opts, start_values=(start,)))
    b = fit(data, truth.spec, replace(opts, start_values=(relabel_parameters(start, r),)))
    assert b.loglik == pytest.approx(a.loglik, abs=1e-6)
    np.testing.assert_allclose(b.params.to_vector(),
                               relabel_parameters(a.params, r).to_vector(), atol=1e-4)


# -- standard errors -------------------------------------------------------

def test_single_class_se_is_binomial(rng):
    spec = ModelSpec.binary(1, 1, 1)
    y = (rng.random(400) < 0.3).astype(int) + 1
    data = Dataset((1,), np.zeros(400, int), y[:, None], np.zeros((400, 0)), np.zeros((1, 0)))
    res = fit(data, spec, FitOptions(n_starts=1, n_refine=1))
    p_hat = np.mean(y == 1)
    assert res.se[0] == pytest.approx(1 / math.sqrt(400 * p_hat * (1 - p_hat)), rel=1e-6)


def test_hessian_is_nearly_symmetric_before_symmetrising(rng):
    spec = ModelSpec((2, 3, 2), 3, 2, 1, 1)
    p = random_parameters(spec, rng)
    data = random_dataset(spec, rng, [5, 6, 4])
    H = numerical_hessian(data, p, symmetrize=False)
    assert np.max(np.abs(H - H.T)) / np.max(np.abs(H)) < 1e-4


def test_se_flagged_when_information_is_singular(rng):
    # two identical classes make the information singular
    spec = ModelSpec.binary(2, 2, 1)
    p = Parameters.zeros(spec)
    data = random_dataset(spec, rng, [10])
    se = standard_errors(data, p)
    assert np.all(np.isnan(se))


# -- classification and Wald tests -----------------------------------------

def test_classify_degenerate_and_ties():
    c = np.array([[0, 1, 0], [0.5, 0.5, 0], [0.2, 0.4, 0.4]])
    w = np.array([[0.5, 0.5], [0, 1.0]])
    post = Posteriors(w, np.repeat(c[:, None], 2, axis=1), c, 0.0)
    m1, m2 = classify(post)
    np.testing.assert_array_equal(m1, [2, 1, 2])
    np.testing.assert_array_equal(m2, [1, 2])


@settings(max_examples=50)
@given(st.lists(st.floats(0.01, 10), min_size=3, max_size=3), st.floats(0.1, 5))
def test_classify_invariant_to_monotone_rescaling(scores, power):
    s = np.array([scores])
    a = s / s.sum()
    b = s ** power / np.sum(s ** power)
    pa = Posteriors(np.ones((1, 1)), a[:, None], a, 0.0)
    pb = Posteriors(np.ones((1, 1)), b[:, None], b, 0.0)
    if len(set(scores)) == 3:
        assert classify(pa)[0][0] == classify(pb)[0][0]


def test_wald_odds_ratio_table_row():
    w = wald_tests(-0.2421, 0.0692)
    assert round(float(w.odds_ratio[0]), 3) == 0.785
    # the SE is itself back-solved from a 3-decimal CI, so compare at display precision
    assert float(w.ci_low[0]) == pytest.approx(0.686, abs=1e-3)
    assert float(w.ci_high[0]) == pytest.approx(0.899, abs=1e-3)
    assert w.significant[0]
    assert significance_stars(w.p[0]) == "***"


def test_wald_zero_estimate():
    w = wald_tests(0.0, 0.3)
    assert w.odds_ratio[0] == 1.0
    assert w.ci_low[0] * w.ci_high[0] == pytest.approx(1.0)
    assert not w.significant[0]


def test_wald_z_four():
    w = wald_tests(math.log(3), math.log(3) / 4)
    assert w.z[0] == pytest.approx(4.0)
    assert w.p[0] == pytest.approx(2 * stats.norm.sf(4.0), rel=1e-12)
    assert w.p[0] == pytest.approx(6.3e-5, abs=1e-6)


def test_wald_unavailable_se():
    w = wald_tests([1.0, 1.0], [np.nan, 0.0])
    assert not w.available.any() and not w.significant.any()


@pytest.mark.parametrize("p, stars", [(0.2, ""), (0.04, "*"), (0.009, "**"), (0.0009, "***"),
                                      (float("nan"), "")])
def test_significance_stars(p, stars):
    assert significance_stars(p) == stars
