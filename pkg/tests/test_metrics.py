import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from npmlca.metrics import (
    ReplicationRecord,
    classification_error,
    critical_value,
    eta_squared,
    factor_eta_squared,
    parameter_recovery,
    rejection_rate,
)
from npmlca.model import ModelError, free_parameter_names
from npmlca.simulator import Condition, build_true_parameters, condition_grid

TRUTH = build_true_parameters(Condition(6, 0.8, 50, 30, (1.5, 3), (1, 1)))
NAMES = free_parameter_names(TRUTH.spec)


def make_record(est, se=None, rep=1, converged=True, usable=True, **kw):
    est = np.asarray(est, float)
    se = np.full(est.size, 0.1) if se is None else np.asarray(se, float)
    base = dict(condition_id=1, replication=rep, seed=rep, estimates=tuple(est), se=tuple(se),
                se_usable=usable, converged=converged, switched=False, perm1=(0, 1, 2),
                perm2=(0, 1), error1=0.1, error2=0.0, loglik=-1.0)
    base.update(kw)
    return ReplicationRecord(**base)


def test_recovery_at_truth_has_no_spread():
    t = TRUTH.to_vector()
    s = parameter_recovery([make_record(t, rep=r) for r in range(3)], TRUTH)
    np.testing.assert_allclose(s.bias, 0.0, atol=1e-15)
    np.testing.assert_array_equal(s.sd, 0.0)
    assert np.all(np.isnan(s.ratio))
    np.testing.assert_allclose(s.crp_bias, 0.0, atol=1e-15)


def test_recovery_sd_on_three_numbers():
    t = TRUTH.to_vector()
    i = NAMES.index("gamma1[1,1]")
    vals = [0.1, 0.5, 0.9]
    recs = []
    for r, v in enumerate(vals):
        e = t.copy()
        e[i] = v
        recs.append(make_record(e, rep=r))
    s = parameter_recovery(recs, TRUTH)
    mean = sum(vals) / 3
    hand_sd = math.sqrt(sum((v - mean) ** 2 for v in vals) / 2)
    assert s.sd[i] == pytest.approx(hand_sd, abs=1e-15)
    assert s.bias[i] == pytest.approx(mean - t[i], abs=1e-15)
    assert s.ratio[i] == pytest.approx(0.1 / hand_sd)


def test_recovery_excludes_nonconverged_and_unusable_se(rng):
    t = TRUTH.to_vector()
    recs = [make_record(t + rng.normal(0, 0.1, t.size), rep=r) for r in range(4)]
    recs.append(make_record(t + 5.0, rep=9, converged=False))
    recs.append(make_record(t, se=np.full(t.size, 7.0), rep=10, usable=False))
    s = parameter_recovery(recs, TRUTH)
    assert s.n_converged == 5 and s.n_excluded == 1 and s.n_se == 4
    np.testing.assert_allclose(s.mean_se, 0.1)
    assert np.all(np.abs(s.bias) < 1.0)


def test_recovery_all_se_unusable_flags_ratio(rng):
    t = TRUTH.to_vector()
    recs = [make_record(t + rng.normal(0, 0.1, t.size), rep=r, usable=False) for r in range(3)]
    s = parameter_recovery(recs, TRUTH)
    assert s.n_se == 0 and np.all(np.isnan(s.ratio))


def test_recovery_needs_two_converged():
    with pytest.raises(ModelError):
        parameter_recovery([make_record(TRUTH.to_vector())], TRUTH)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 8))
def test_bias_plus_truth_is_mean(seed, n):
    rng = np.random.default_rng(seed)
    t = TRUTH.to_vector()
    recs = [make_record(t + rng.normal(0, 0.3, t.size), rep=r) for r in range(n)]
    s = parameter_recovery(recs, TRUTH)
    np.testing.assert_allclose(s.bias + s.truth, s.mean_estimate, rtol=0, atol=1e-14)
    assert np.all(s.sd >= 0)


def test_class_crp_table_shape():
    t = TRUTH.to_vector()
    s = parameter_recovery([make_record(t + 0.01 * r, rep=r) for r in range(3)], TRUTH)
    rows = s.class_crp_table(TRUTH.spec)
    assert [r["class"] for r in rows] == [1, 2, 3]
    assert set(rows[0]) == {"class", "bias", "se", "sd", "se_sd"}


def test_rejection_rate_all_significant():
    t = TRUTH.to_vector()
    i = NAMES.index("gamma1[1,1]")
    recs = []
    for r in range(5):
        e = t.copy()
        e[i] = 0.5
        recs.append(make_record(e, rep=r))
    assert rejection_rate(recs, i).rate == 1.0


def test_rejection_rate_two_denominators():
    t = TRUTH.to_vector()
    i = NAMES.index("gamma2[1,1]")
    recs = []
    for r, v in enumerate([0.5, 0.0, 0.5, 0.5]):
        e = t.copy()
        e[i] = v
        recs.append(make_record(e, rep=r, converged=(r != 3)))
    rr = rejection_rate(recs, i)
    assert (rr.rate, rr.n) == (pytest.approx(2 / 3), 3)
    assert (rr.rate_all, rr.n_all) == (0.5, 4)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=20), st.floats(0.001, 0.5),
       st.floats(0.001, 0.5))
def test_rejection_rate_monotone_in_alpha(zs, a1, a2):
    t = TRUTH.to_vector()
    i = NAMES.index("gamma1[2,1]")
    recs = []
    for r, z in enumerate(zs):
        e = t.copy()
        e[i] = z * 0.1
        recs.append(make_record(e, rep=r))
    lo, hi = sorted((a1, a2))
    # smaller alpha, larger critical value, fewer rejections
    assert critical_value(lo) >= critical_value(hi)
    assert rejection_rate(recs, i, lo).rate <= rejection_rate(recs, i, hi).rate


def test_classification_error_cases():
    assert classification_error([1, 2, 3], [1, 2, 3]) == 0.0
    assert classification_error([1, 2, 3, 1], [1, 2, 3, 2]) == 0.25
    with pytest.raises(ModelError):
        classification_error([1, 2], [1, 2, 3])


@settings(max_examples=40)
@given(st.lists(st.tuples(st.integers(1, 3), st.integers(1, 3)), min_size=1, max_size=30),
       st.permutations([1, 2, 3]))
def test_classification_error_permutation_invariant(pairs, perm):
    pred = np.array([p for p, _ in pairs])
    true = np.array([t for _, t in pairs])
    mapping = np.array([0, *perm])
    assert classification_error(mapping[pred], mapping[true]) == classification_error(pred, true)


def test_eta_squared_constant_and_pure():
    grid = condition_grid()
    const = np.full(96, 0.2)
    for f in ("n_indicators", "crp_quality", "site_size"):
        assert factor_eta_squared(const, grid, f) == 0.0
    pure = np.array([{0.7: 0.3, 0.8: 0.2, 0.9: 0.1}[c.crp_quality] for c in grid])
    assert factor_eta_squared(pure, grid, "crp_quality") == pytest.approx(1.0)
    for f in ("n_indicators", "n_sites", "site_size", "l1_effects", "l2_effects"):
        assert factor_eta_squared(pure, grid, f) == pytest.approx(0.0, abs=1e-12)


def test_eta_squared_two_by_two_hand_anova():
    # y = 1 + 2a + 1b + interaction 0.5 on (1, 1)
    cells = list(itertools.product([0, 1], [0, 1]))
    y = np.array([1 + 2 * a + b + 0.5 * a * b for a, b in cells])
    grand = y.mean()
    ss_t = np.sum((y - grand) ** 2)
    ma = [y[[i for i, (a, _) in enumerate(cells) if a == v]].mean() for v in (0, 1)]
    mb = [y[[i for i, (_, b) in enumerate(cells) if b == v]].mean() for v in (0, 1)]
    ss_a = 2 * sum((m - grand) ** 2 for m in ma)
    ss_b = 2 * sum((m - grand) ** 2 for m in mb)
    assert eta_squared(y, [a for a, _ in cells]) == pytest.approx(ss_a / ss_t)
    assert eta_squared(y, [b for _, b in cells]) == pytest.approx(ss_b / ss_t)
    # cells (1, 2, 3, 4.5): SS_a = 2 * 2 * 1.125**2, SS_total = 6.6875
    assert eta_squared(y, [a for a, _ in cells]) == pytest.approx(5.0625 / 6.6875)


@settings(max_examples=30)
@given(st.lists(st.floats(0, 1), min_size=96, max_size=96))
def test_main_effects_do_not_exceed_total(values):
    grid = condition_grid()
    total = sum(factor_eta_squared(values, grid, f)
                for f in ("n_indicators", "crp_quality", "n_sites", "site_size",
                          "l1_effects", "l2_effects"))
    assert total <= 1 + 1e-9


def test_unknown_factor():
    with pytest.raises(ModelError):
        factor_eta_squared([0.1], condition_grid()[:1], "colour")


def test_record_validation_and_round_trip():
    t = TRUTH.to_vector()
    rec = make_record(t, se=[np.nan] + [0.1] * (t.size - 1))
    d = rec.to_dict()
    assert d["se"][0] is None
    assert ReplicationRecord.from_dict(d) == rec
    with pytest.raises(ValueError):
        make_record(t, error1=1.5)
