import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from divens import metrics as mt
from divens.errors import NumericalError
from divens.regularizers import entropy
from oracles import brute_pairs_auc, trapezoid_auc


def random_simplex(rng, *shape):
    return rng.dirichlet(np.ones(shape[-1]), size=shape[:-1])


# ---------------------------------------------------------------- accuracy / nll


def test_accuracy_cases():
    assert mt.accuracy(np.eye(3), [0, 1, 2]) == 1.0
    assert mt.accuracy(np.full((4, 3), 1 / 3), [0, 1, 0, 2]) == 0.5
    p = np.eye(4)[[0, 1, 2, 0]]
    assert mt.accuracy(p, [0, 1, 2, 3]) == 0.75


def test_nll_cases():
    assert mt.nll(np.full((5, 10), 0.1), np.arange(5)) == pytest.approx(math.log(10), rel=1e-14)
    assert mt.nll(np.eye(3), [0, 1, 2]) == pytest.approx(0.0, abs=1e-15)
    p = np.array([[0.5, 0.5], [0.75, 0.25]])
    assert mt.nll(p, [0, 1]) == pytest.approx((math.log(2) + math.log(4)) / 2, rel=1e-14)
    assert mt.nll(np.array([[1.0, 0.0]]), [1]) == pytest.approx(-math.log(1e-12))


# ---------------------------------------------------------------- ece


def test_ece_perfect_confident():
    assert mt.ece(np.eye(4), [0, 1, 2, 3]) == 0.0


def test_ece_single_bin():
    p = np.tile([0.8, 0.2], (10, 1))
    y = np.array([0] * 6 + [1] * 4)
    assert mt.ece(p, y, bins=1) == pytest.approx(0.2, abs=1e-15)


def test_ece_three_bin_fixture():
    # edges 0, 1/3, 2/3, 1
    p = np.array([
        [0.30, 0.25, 0.25, 0.20],  # bin 0, correct
        [0.50, 0.30, 0.20, 0.00],  # bin 1, wrong
        [0.60, 0.40, 0.00, 0.00],  # bin 1, correct
        [0.90, 0.10, 0.00, 0.00],  # bin 2, correct
        [0.80, 0.20, 0.00, 0.00],  # bin 2, wrong
    ])
    y = np.array([0, 1, 0, 0, 1])
    # (1*|1-.3| + 2*|.5-.55| + 2*|.5-.85|) / 5
    assert mt.ece(p, y, bins=3) == pytest.approx(0.3, abs=1e-15)
    rb = mt.reliability_bins(p, y, bins=3)
    assert list(rb["count"]) == [1, 2, 2]


def test_ece_right_inclusive_edges():
    # confidence exactly 0.5 belongs to the lower of two bins
    p = np.array([[0.5, 0.5]])
    assert mt.reliability_bins(p, [0], bins=2)["count"].tolist() == [1, 0]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_ece_in_unit_interval_and_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    p = random_simplex(rng, 60, 5)
    y = rng.integers(0, 5, 60)
    e = mt.ece(p, y)
    assert 0.0 <= e <= 1.0
    perm = rng.permutation(60)
    assert mt.ece(p[perm], y[perm]) == pytest.approx(e, abs=1e-12)


# ---------------------------------------------------------------- temperature


def test_golden_section_quadratic():
    assert mt.golden_section(lambda t: (t - 3.7) ** 2, 0.0, 10.0, 1e-8) == pytest.approx(3.7, abs=1e-7)


def _calibrated_logits(rng, n=20000, classes=5):
    z = rng.normal(scale=2.0, size=(n, classes))
    p = mt.softmax(z)
    y = (p.cumsum(1) > rng.random((n, 1))).argmax(1)
    return z, y


def test_calibrated_logits_fit_unit_temperature(rng):
    z, y = _calibrated_logits(rng)
    assert mt.optimal_temperature(z, y) == pytest.approx(1.0, abs=1e-2)


@pytest.mark.parametrize("scale", [0.5, 2.0, 4.0])
def test_injected_scale_recovered(rng, scale):
    z, y = _calibrated_logits(rng, n=4000)
    z = z / mt.optimal_temperature(z, y, tol=1e-8)
    assert mt.optimal_temperature(z * scale, y) == pytest.approx(scale, rel=0.02)


def test_doubling_logits_doubles_temperature(rng):
    z, y = _calibrated_logits(rng, n=500, classes=4)
    t1 = mt.optimal_temperature(z, y, tol=1e-8)
    assert mt.optimal_temperature(2 * z, y, tol=1e-8) == pytest.approx(2 * t1, rel=1e-6)


def test_scaled_nll_not_worse_on_fitting_folds():
    for trial in range(50):
        rng = np.random.default_rng(trial)
        z = rng.normal(scale=rng.uniform(0.3, 5.0), size=(3, 100, 4))
        y = rng.integers(0, 4, 100)
        fit = mt.fit_temperature(z, y, folds=5, seed=trial)
        zm = z.mean(0)
        for k, t in enumerate(fit.fold_temperatures):
            fitting = fit.fold_of != k
            assert mt.scaled_nll(zm[fitting], y[fitting], t) <= mt.scaled_nll(zm[fitting], y[fitting], 1.0)


def test_fit_temperature_uses_held_out_fold(rng):
    z, y = rng.normal(size=(2, 50, 3)), rng.integers(0, 3, 50)
    fit = mt.fit_temperature(z, y, folds=5)
    assert np.bincount(fit.fold_of).tolist() == [10] * 5
    assert fit.temperature == pytest.approx(fit.fold_temperatures.mean())
    k = 2
    held = fit.fold_of == k
    np.testing.assert_allclose(fit.scaled_probs[held], mt.softmax(z.mean(0)[held] / fit.fold_temperatures[k]))


def test_fit_temperature_errors(rng):
    z, y = rng.normal(size=(20, 3)), rng.integers(0, 3, 20)
    with pytest.raises(ValueError):
        mt.fit_temperature(z, y, folds=1)
    z[3, 1] = np.nan
    with pytest.raises(NumericalError):
        mt.fit_temperature(z, y)


def test_temperature_preserves_argmax(rng):
    z, y = rng.normal(size=(3, 40, 6)), rng.integers(0, 6, 40)
    fit = mt.fit_temperature(z, y)
    assert np.array_equal(fit.scaled_probs.argmax(1), z.mean(0).argmax(1))


# ---------------------------------------------------------------- auc


def test_auc_cases():
    assert mt.auc_from_scores([0.9, 0.8], [0.7, 0.1]) == 1.0
    assert mt.auc_from_scores([0.5, 0.5, 0.5], [0.5, 0.5]) == 0.5
    assert mt.auc_from_scores([0.9, 0.8], [0.85, 0.1]) == 0.75
    with pytest.raises(ValueError):
        mt.auc_from_scores([], [0.1])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 200), st.integers(1, 200))
def test_auc_matches_threshold_integration(seed, n_id, n_ood):
    rng = np.random.default_rng(seed)
    # coarse grid forces ties
    pos = np.round(rng.random(n_id), 2)
    neg = np.round(rng.random(n_ood) * 0.8, 2)
    assert abs(mt.auc_from_scores(pos, neg) - trapezoid_auc(pos, neg)) < 1e-10


def test_auc_matches_pair_count(rng):
    pos, neg = rng.random(30), rng.random(25)
    assert mt.auc_from_scores(pos, neg) == pytest.approx(brute_pairs_auc(pos, neg), abs=1e-12)


def test_auc_roc_uses_max_probability():
    id_p = np.array([[0.9, 0.1], [0.8, 0.2]])
    ood_p = np.array([[0.15, 0.85], [0.55, 0.45]])
    assert mt.auc_roc(id_p, ood_p) == 0.75


# ---------------------------------------------------------------- diversity


def test_jsd_two_members():
    p = np.array([[[0.9, 0.1]], [[0.1, 0.9]]])
    expected = 0.9 * math.log(1.8) + 0.1 * math.log(0.2)
    assert mt.jsd(p) == pytest.approx(expected, rel=1e-12)
    assert mt.jsd(p) == pytest.approx(0.3681, abs=1e-4)


def test_jsd_zero_iff_duplicated(rng):
    p = random_simplex(rng, 1, 8, 4)
    assert mt.jsd(np.repeat(p, 3, axis=0)) == pytest.approx(0.0, abs=1e-15)
    for _ in range(20):
        q = random_simplex(rng, 3, 8, 4)
        assert mt.jsd(q) > 0


def test_kl_handles_zero_mass():
    assert mt.kl([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2))


def test_oracle_nll_cases():
    p = np.array([[[0.5, 0.5]], [[0.25, 0.75]]])
    assert mt.oracle_nll(p, [0]) == pytest.approx(-math.log(0.5))
    single = np.array([[[0.3, 0.7], [0.6, 0.4]]])
    assert mt.oracle_nll(single, [1, 1]) == pytest.approx(mt.nll(single[0], [1, 1]))


def test_oracle_nll_bounded_by_members(rng):
    for _ in range(30):
        p = random_simplex(rng, 4, 20, 5)
        y = rng.integers(0, 5, 20)
        assert mt.oracle_nll(p, y) <= min(mt.nll(m, y) for m in p) + 1e-15


def test_disagreement_matrix_properties(rng):
    p = random_simplex(rng, 4, 50, 3)
    d = mt.disagreement_matrix(p)
    assert np.all(np.diag(d) == 0) and np.array_equal(d, d.T)
    assert np.all((0 <= d) & (d <= 1))
    assert np.all(mt.disagreement_matrix(np.repeat(p[:1], 3, axis=0)) == 0)


def test_entropy_concavity(rng):
    for _ in range(30):
        p = random_simplex(rng, 5, 10, 6)
        mean_h = np.mean([entropy(m) for m in p], axis=0)
        assert np.all(entropy(p.mean(0)) >= mean_h - 1e-12)


def test_labelled_report(rng):
    logits = rng.normal(size=(3, 40, 4))
    probs = np.stack([mt.softmax(z) for z in logits])
    y = rng.integers(0, 4, 40)
    rep = mt.labelled_report("clean", logits, probs, y)
    assert rep.accuracy == mt.accuracy(probs.mean(0), y)
    m = rep.metrics()
    assert set(m) >= {"accuracy", "nll", "ece", "temperature", "jsd", "oracle_nll", "disagreement"}
    assert 0 <= m["mean_entropy"] <= 1 and m["temperature"] > 0
