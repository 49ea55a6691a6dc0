import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from miso.data import SyntheticFactorizedSpec, generate_synthetic
from miso.evaluation import (
    CONSISTENCY_CAP,
    ClassifierError,
    DomainClassifier,
    classifier_metrics,
    evaluate,
    index_style,
    interpolate,
    io_distance,
    mean_pairwise_distance,
    oo_diversity,
    rms_distance,
    same_z_consistency,
    synthetic_eval_data,
    synthetic_real_groups,
)

SPEC = SyntheticFactorizedSpec(n_samples=2000, seed=11)


class FnModel:
    def __init__(self, fn, n_z=2):
        self.fn, self.n_z = fn, n_z

    def __call__(self, x, z):
        return self.fn(np.asarray(x), np.asarray(z))


def swap_styles(x, z):
    """Ground-truth style for the other domain written from z (tanh keeps it in range)."""
    out = x.copy()
    out[:, 2], out[:, 3] = np.tanh(z[:, 0]), 0.0
    return out


@pytest.fixture(scope="module")
def classifier():
    a, b = generate_synthetic(SyntheticFactorizedSpec(n_samples=3000, seed=5))
    clf = DomainClassifier(4, seed=0)
    clf.fit(a.samples, b.samples, np.random.default_rng(0))
    return clf


# ---- distances

finite = st.floats(-1, 1, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=finite), arrays(np.float64, (3, 5), elements=finite))
def test_distance_is_symmetric_nonnegative_and_zero_on_equal(x, y):
    d = rms_distance(x, y)
    np.testing.assert_array_equal(d, rms_distance(y, x))
    assert np.all(d >= 0)
    np.testing.assert_array_equal(rms_distance(x, x), 0.0)


def test_identity_model_has_zero_io_distance():
    x = np.random.default_rng(0).uniform(-1, 1, (20, 4))
    assert io_distance(FnModel(lambda x, z: x), x, 3, np.random.default_rng(1)) == 0.0


def test_constant_model_io_distance_is_direct_mean():
    x = np.random.default_rng(0).uniform(-1, 1, (20, 4))
    c = np.array([0.1, -0.2, 0.3, 0.0])
    model = FnModel(lambda x, z: np.broadcast_to(c, x.shape).copy())
    expected = np.mean(np.sqrt(np.mean((x - c) ** 2, axis=1)))
    assert io_distance(model, x, 4, np.random.default_rng(1)) == pytest.approx(expected, rel=1e-14)
    content_only = np.mean(np.sqrt(np.mean((x[:, :2] - c[:2]) ** 2, axis=1)))
    assert io_distance(model, x, 4, np.random.default_rng(1), np.arange(2)) == pytest.approx(content_only, rel=1e-14)


def test_non_finite_outputs_are_rejected():
    x = np.zeros((3, 4))
    with pytest.raises(FloatingPointError):
        io_distance(FnModel(lambda x, z: x * np.nan), x, 1, np.random.default_rng(0))


def test_model_ignoring_z_has_no_diversity():
    x = np.random.default_rng(0).uniform(-1, 1, (10, 4))
    groups = np.random.default_rng(1).uniform(-1, 1, (10, 3, 4))
    div, real = oo_diversity(FnModel(lambda x, z: x), x, 5, np.random.default_rng(2), groups)
    assert div == 0.0 and real > 0


def test_outputs_equal_to_real_groups_reach_the_bound():
    groups = np.random.default_rng(1).uniform(-1, 1, (10, 4, 4))
    assert mean_pairwise_distance(groups) == pytest.approx(mean_pairwise_distance(groups.copy()))
    with pytest.raises(ValueError):
        mean_pairwise_distance(groups[:, :1])


def test_ground_truth_translator_reaches_the_real_bound_statistically():
    data = synthetic_eval_data(SPEC, 400)
    rng = np.random.default_rng(3)
    groups = synthetic_real_groups(SPEC, "B", data.content_a, 10, rng)

    def truth(x, z):
        out = x.copy()
        out[:, 2], out[:, 3] = 0.0, rng.uniform(-1, 1, len(x))
        return out

    div, real = oo_diversity(FnModel(truth), data.inputs_a, 10, rng, groups)
    assert div == pytest.approx(real, rel=0.05)


# ---- classifier

def test_classifier_reaches_target_and_freezes(classifier):
    assert classifier.heldout_accuracy > 0.99
    before = [p.data.copy() for p in classifier.net.parameters()]
    a, b = generate_synthetic(SyntheticFactorizedSpec(n_samples=500, seed=99))
    acc, lik = classifier_metrics(classifier, FnModel(lambda x, z: x), b.samples, 2, np.random.default_rng(0), "B")
    assert acc > 0.99 and 0.5 < lik <= 1.0
    for p, q in zip(before, classifier.net.parameters()):
        np.testing.assert_array_equal(p, q.data)
    with pytest.raises(ClassifierError):
        classifier.fit(a.samples, b.samples, np.random.default_rng(0))


def test_untrained_classifier_refuses_metrics():
    with pytest.raises(ClassifierError):
        classifier_metrics(DomainClassifier(4), FnModel(lambda x, z: x), np.zeros((2, 4)), 1,
                           np.random.default_rng(0), "A")


def test_classifier_that_cannot_separate_raises():
    x = np.random.default_rng(0).uniform(-1, 1, (400, 2))
    with pytest.raises(ClassifierError):
        DomainClassifier(2).fit(x[:200], x[200:], np.random.default_rng(0), max_steps=300)


# ---- same-z consistency

def test_style_from_z_only_gives_zero_ratio():
    x = np.random.default_rng(0).uniform(-1, 1, (8, 4))
    c = same_z_consistency(FnModel(swap_styles), x, np.random.default_rng(1).normal(size=(5, 2)), index_style([2]))
    assert c.ratio < 1e-20 and c.flag is None


def test_style_copied_from_source_is_capped():
    x = np.random.default_rng(0).uniform(-1, 1, (8, 4))
    c = same_z_consistency(FnModel(lambda x, z: x), x, np.random.default_rng(1).normal(size=(5, 2)), index_style([2]))
    assert c.ratio == CONSISTENCY_CAP and c.flag == "capped"


def test_constant_output_is_degenerate():
    x = np.random.default_rng(0).uniform(-1, 1, (8, 4))
    c = same_z_consistency(FnModel(lambda x, z: np.zeros_like(x)), x, np.ones((3, 2)) * [[1], [2], [3]],
                           index_style([2]))
    assert c.ratio == 0.0 and c.flag == "degenerate"


def test_consistency_needs_two_of_each():
    with pytest.raises(ValueError):
        same_z_consistency(FnModel(swap_styles), np.zeros((1, 4)), np.zeros((3, 2)), index_style([2]))


# ---- interpolation

def test_interpolation_endpoints_are_exact():
    rng = np.random.default_rng(0)
    model = FnModel(swap_styles)
    x, z1, z2 = rng.uniform(-1, 1, (1, 4)), rng.normal(size=2), rng.normal(size=2)
    frames = interpolate(model, x, z1, z2, 11)
    assert len(frames) == 11
    np.testing.assert_array_equal(frames[0], model(x, z1[None]))
    np.testing.assert_array_equal(frames[-1], model(x, z2[None]))
    same = interpolate(model, x, z1, z1, 5)
    assert all(np.array_equal(f, same[0]) for f in same)
    with pytest.raises(ValueError):
        interpolate(model, x, z1, z2, 1)


# ---- full report

def test_report_schema_and_bounds(classifier):
    data = synthetic_eval_data(SyntheticFactorizedSpec(n_samples=300, seed=21), 50)
    translators = {"a2b": FnModel(lambda x, z: x[:, [0, 1, 3, 2]]), "b2a": FnModel(lambda x, z: x[:, [0, 1, 3, 2]])}
    rep = evaluate(translators, data, classifier, m_styles=4, seed=0)
    d = json.loads(json.dumps(rep.to_dict()))
    for key in ("io_distance", "oo_diversity", "real_oo_upper_bound", "classifier_accuracy",
                "mean_likelihood_per_domain", "same_z_consistency_ratio", "directions", "distance_proxy"):
        assert key in d
    assert set(d["directions"]) == {"a2b", "b2a"}
    # a slot swap keeps content and lands in the other domain but ignores z
    assert d["io_distance"] == 0.0 and d["oo_diversity"] == 0.0
    assert d["classifier_accuracy"] > 0.99
    assert d["directions"]["a2b"]["same_z_flag"] == "capped"
    for r in d["directions"].values():
        assert 0 <= r["classifier_accuracy"] <= 1 and 0 <= r["mean_likelihood"] <= 1
