import itertools
import math

import numpy as np
import pytest
import torch

from treediff.config import Rng, SyntheticClusterSpec
from treediff.data import make_synthetic, train_test_split
from treediff.errors import ValidationError
from treediff.evaluation import (
    FeatureExtractor,
    MetricsReport,
    cluster_accuracy,
    extract_features,
    frechet_distance,
    histogram_entropy,
    leaf_specificity,
    nmi,
    predict_classes,
    train_feature_extractor,
)


def _acc_brute_force(y, l):
    """Exhaustive search over injective cluster-to-class matchings."""
    classes, leaves = np.unique(y), np.unique(l)
    best = 0
    if len(leaves) <= len(classes):
        for perm in itertools.permutations(classes, len(leaves)):
            best = max(best, sum(int(np.sum((l == leaf) & (y == c))) for leaf, c in zip(leaves, perm)))
    else:
        for perm in itertools.permutations(leaves, len(classes)):
            best = max(best, sum(int(np.sum((l == leaf) & (y == c))) for leaf, c in zip(perm, classes)))
    return best / len(y)


# -- clustering accuracy ---------------------------------------------------------


def test_acc_permutation_invariance():
    assert cluster_accuracy([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0
    assert cluster_accuracy([0, 0, 1, 1], [5, 5, 9, 9]) == 1.0


def test_acc_single_cluster():
    assert cluster_accuracy([0, 1, 0, 1], [0, 0, 0, 0]) == 0.5


def test_acc_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(10, 60))
        k_true = int(rng.integers(2, 6))
        k_pred = int(rng.integers(2, 6))
        y = rng.integers(0, k_true, n)
        l = rng.integers(0, k_pred, n)
        assert cluster_accuracy(y, l) == pytest.approx(_acc_brute_force(y, l))


def test_acc_empty_rejected():
    with pytest.raises(ValidationError):
        cluster_accuracy([], [])


# -- NMI -----------------------------------------------------------------------------


def test_nmi_identical_partitions():
    assert nmi([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert nmi([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0  # relabeling invariance


def test_nmi_symmetry():
    rng = np.random.default_rng(1)
    a = rng.integers(0, 4, 200)
    b = rng.integers(0, 3, 200)
    assert nmi(a, b) == pytest.approx(nmi(b, a), abs=1e-12)


def test_nmi_independent_partitions_near_zero():
    rng = np.random.default_rng(2)
    n = 10_000
    a = rng.integers(0, 4, n)
    b = rng.integers(0, 4, n)  # independent of a
    assert nmi(a, b) < 0.02


def test_nmi_degenerate_rules():
    # zero-entropy side, partitions not identical -> 0
    assert nmi([0, 0, 0, 0], [0, 1, 0, 1]) == 0.0
    # both constant: identical partitions -> 1
    assert nmi([3, 3, 3], [7, 7, 7]) == 1.0
    # strict refinement of a constant partition is not identical
    assert nmi([0, 1, 2], [0, 0, 0]) == 0.0


def test_nmi_bounds():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = rng.integers(0, 5, 100)
        b = rng.integers(0, 5, 100)
        v = nmi(a, b)
        assert 0.0 <= v <= 1.0


# -- Frechet distance -------------------------------------------------------------------


def test_frechet_zero_on_identical_sets():
    feats = np.random.default_rng(0).normal(size=(500, 8))
    assert frechet_distance(feats, feats) == pytest.approx(0.0, abs=1e-6)


def test_frechet_closed_form_mean_shift():
    rng = np.random.default_rng(1)
    n, width = 10_000, 8
    mu = np.linspace(0.5, 1.2, width)
    a = rng.normal(size=(n, width))
    b = rng.normal(size=(n, width)) + mu
    target = float(mu @ mu)
    assert frechet_distance(a, b) == pytest.approx(target, rel=0.05)


def test_frechet_symmetric_and_nonnegative():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(300, 6))
    b = rng.normal(size=(300, 6)) * 1.4 + 0.3
    d_ab = frechet_distance(a, b)
    d_ba = frechet_distance(b, a)
    assert d_ab >= 0
    assert d_ab == pytest.approx(d_ba, rel=1e-6)


def test_frechet_not_affine_invariant():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(2000, 4))
    b = rng.normal(size=(2000, 4)) + 1.0
    base = frechet_distance(a, b)
    scaled = frechet_distance(3.0 * a, 3.0 * b)
    assert scaled != pytest.approx(base, rel=0.01)  # documented: NOT invariant


def test_frechet_input_validation():
    with pytest.raises(ValidationError):
        frechet_distance(np.zeros((5, 3)), np.zeros((5, 4)))
    with pytest.raises(ValidationError):
        frechet_distance(np.zeros((1, 3)), np.zeros((5, 3)))


# -- feature extractor ---------------------------------------------------------------


def _toy_data():
    spec = SyntheticClusterSpec(
        num_clusters=4,
        image_size=8,
        patterns=("disk", "cross", "checker", "square"),
        noise_std=0.05,
        samples_per_cluster=48,
    )
    batch = make_synthetic(spec, Rng(0))
    return train_test_split(batch, 0.75, Rng(1))


def test_extractor_reaches_gate_on_easy_data():
    train, test = _toy_data()
    model = train_feature_extractor(train, test, epochs=3, rng=Rng(2), width=8)
    assert model.test_accuracy is not None and model.test_accuracy >= 0.9
    feats = extract_features(model, test.values)
    assert feats.shape == (len(test), model.feature_width)
    assert np.array_equal(feats, extract_features(model, test.values))  # deterministic


def test_extractor_requires_labels():
    train, test = _toy_data()
    train.labels = None
    with pytest.raises(ValidationError):
        train_feature_extractor(train, test, epochs=1, rng=Rng(0))


# -- leaf specificity --------------------------------------------------------------------


def test_uniform_histogram_entropy():
    hist = np.full(10, 0.1)
    assert histogram_entropy(hist) == pytest.approx(math.log(10.0))
    assert histogram_entropy([1.0, 0.0]) == 0.0


def test_leaf_specificity_pure_and_excluded():
    train, test = _toy_data()
    extractor = train_feature_extractor(train, test, epochs=3, rng=Rng(2), width=8)
    per_leaf = {
        1: train.values[train.labels == 0][:16],  # pure: one class only
        2: train.values[train.labels == 1][:16],
        3: train.values[:16],  # mixed, but excluded by prior mass below
    }
    masses = {1: 0.5, 2: 0.45, 3: 0.001}
    hists, mean_entropy = leaf_specificity(per_leaf, extractor, masses)
    assert set(hists) == {1, 2}
    for hist in hists.values():
        assert hist.sum() == pytest.approx(1.0)
    assert mean_entropy == pytest.approx(0.0, abs=1e-6)
    assert mean_entropy <= math.log(extractor.num_classes)


def test_leaf_specificity_gate_refusal():
    train, test = _toy_data()
    extractor = FeatureExtractor(1, 4, width=8)
    extractor.test_accuracy = 0.5
    with pytest.raises(ValidationError, match="gate"):
        leaf_specificity({1: train.values[:4]}, extractor, {1: 1.0})


def test_leaf_specificity_no_included_leaves():
    train, test = _toy_data()
    extractor = train_feature_extractor(train, test, epochs=3, rng=Rng(2), width=8)
    with pytest.raises(ValidationError, match="inclusion"):
        leaf_specificity({1: train.values[:4]}, extractor, {1: 0.0001})


# -- metrics report ------------------------------------------------------------------------


def test_report_round_trip_and_validation():
    report = MetricsReport(
        acc=0.9,
        nmi=0.8,
        fid_rec=12.0,
        fid_gen=20.0,
        per_leaf_histograms={1: [0.5, 0.5], 2: [1.0, 0.0]},
        mean_entropy=0.35,
    )
    report.validate()
    clone = MetricsReport.from_json(report.to_json())
    assert clone == report


def test_report_rejects_out_of_range():
    report = MetricsReport(acc=1.2, nmi=0.5, fid_rec=1.0, fid_gen=1.0)
    with pytest.raises(ValidationError):
        report.validate()
    report = MetricsReport(acc=0.5, nmi=0.5, fid_rec=-1.0, fid_gen=1.0)
    with pytest.raises(ValidationError):
        report.validate()
