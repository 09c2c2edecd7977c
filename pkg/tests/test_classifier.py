"""NN-ball posterior classifier against brute-force and high-precision oracles."""

import csv

import mpmath
import numpy as np
import pytest

from edfdetect.classifier import (build_reference, classify_batch,
                                  load_reference_csv, min_class_distance,
                                  posterior, write_posteriors_csv)
from edfdetect.errors import DataError, DimensionMismatchError, SingleClassError
from edfdetect.features import FeatureVector, write_features_csv


def fv(tau, label, pid=""):
    tau = np.asarray(tau, dtype=float)
    return FeatureVector(tau=tau, raw_edf=tau.copy(), label=label, patch_id=pid,
                         frequency=8.0, phase=0.0)


def simple_ref(dim=2):
    # class a holds the origin, class b a point at distance 3 along axis 0
    a = np.zeros(dim)
    b = np.zeros(dim)
    b[0] = 3.0
    return build_reference([fv(a, "a", "pa"), fv(b, "b", "pb")])


def test_build_reference_counts():
    ref = build_reference([fv([0, 0], "a"), fv([1, 0], "a"), fv([0, 1], "b")])
    assert ref.classes == ("a", "b")
    assert ref.per_class_counts == {"a": 2, "b": 1}


def test_build_reference_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        build_reference([fv([0, 0], "a"), fv([1, 0, 0], "b")])


def test_build_reference_single_class():
    with pytest.raises(SingleClassError):
        build_reference([fv([0, 0], "a"), fv([1, 1], "a")])


def test_build_reference_counts_match_manifest():
    rng = np.random.default_rng(0)
    labels = ["defect_free"] * 400 + ["crater"] * 80 + ["dirt"] * 120
    vectors = [fv(rng.standard_normal(5), lab, f"p{i}")
               for i, lab in enumerate(labels)]
    ref = build_reference(vectors)
    assert ref.per_class_counts == {"defect_free": 400, "crater": 80, "dirt": 120}


def test_min_distance_to_own_point_is_zero():
    ref = simple_ref()
    d = min_class_distance(ref, np.array([0.0, 0.0]))
    assert d[0] == 0.0 and d[1] == 3.0


def test_min_distance_one_dimensional_example():
    ref = build_reference([fv([0.0], "a"), fv([3.0], "b")])
    np.testing.assert_allclose(min_class_distance(ref, np.array([1.0])), [1.0, 2.0])


def test_min_distance_matches_brute_force():
    rng = np.random.default_rng(1)
    points = rng.standard_normal((200, 7))
    labels = [("a", "b", "c")[i % 3] for i in range(200)]
    ref = build_reference([fv(p, lab, f"p{i}")
                           for i, (p, lab) in enumerate(zip(points, labels))])
    for _ in range(25):
        query = rng.standard_normal(7)
        got = min_class_distance(ref, query)
        for j, cls in enumerate(ref.classes):
            brute = min(np.sqrt(((p - query) ** 2).sum())
                        for p, lab in zip(points, labels) if lab == cls)
            assert abs(got[j] - brute) <= 1e-12


def test_posterior_hand_case():
    # distances (1, 2) in dimension 2: p1 = 1 / (1 + 2^-2) = 0.8
    ref = simple_ref(dim=2)
    post = posterior(ref, np.array([1.0, 0.0]))
    np.testing.assert_allclose(post.probabilities, [0.8, 0.2], atol=1e-12)
    assert post.predicted == "a"


def test_posterior_equal_distances_is_uniform():
    pts = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
    ref = build_reference([fv(pts[0], "a"), fv(pts[1], "b"), fv(pts[2], "c")])
    post = posterior(ref, np.zeros(3))
    np.testing.assert_allclose(post.probabilities, np.full(3, 1 / 3), atol=1e-12)
    assert abs(post.entropy - np.log(3)) <= 1e-12


def test_posterior_extreme_distances_match_mpmath():
    dim = 91
    near, far = 1e-3, 1e3
    a = np.zeros(dim); a[0] = near
    b = np.zeros(dim); b[0] = -far
    ref = build_reference([fv(a, "a"), fv(b, "b")])
    post = posterior(ref, np.zeros(dim))
    d = np.exp(post.log_distances)

    mpmath.mp.dps = 80
    vals = [mpmath.mpf(x) ** (-dim) for x in d]
    total = vals[0] + vals[1]
    log_p2 = float(mpmath.log(vals[1] / total))
    assert np.isfinite(post.probabilities).all()
    assert np.isfinite(post.log_probabilities).all()
    assert abs(post.log_probabilities[1] - log_p2) <= 1e-10 * abs(log_p2)


def test_posterior_zero_distance_rule():
    ref = simple_ref()
    post = posterior(ref, np.array([0.0, 0.0]))
    np.testing.assert_array_equal(post.probabilities, [1.0, 0.0])
    assert post.predicted == "a"
    # equidistant-at-zero: two classes sharing the query point
    ref2 = build_reference([fv([0, 0], "a"), fv([0, 0], "b"), fv([5, 5], "b")])
    post2 = posterior(ref2, np.array([0.0, 0.0]))
    np.testing.assert_array_equal(post2.probabilities, [0.5, 0.5])


def test_classify_batch_empty():
    assert classify_batch(simple_ref(), np.empty((0, 2))) == []


def test_classify_batch_self_match():
    rng = np.random.default_rng(2)
    vectors = [fv(rng.standard_normal(6), ("a", "b", "c")[i % 3], f"p{i}")
               for i in range(30)]
    ref = build_reference(vectors)
    posts = classify_batch(ref, vectors)
    assert all(p.predicted == v.label for p, v in zip(posts, vectors))


def test_classify_batch_matches_single_calls():
    rng = np.random.default_rng(3)
    vectors = [fv(rng.standard_normal(5), ("a", "b")[i % 2], f"p{i}")
               for i in range(40)]
    ref = build_reference(vectors)
    queries = [fv(rng.standard_normal(5), None, f"q{i}") for i in range(100)]
    batch = classify_batch(ref, queries)
    for q, got in zip(queries, batch):
        single = posterior(ref, q.tau, patch_id=q.patch_id)
        np.testing.assert_array_equal(got.probabilities, single.probabilities)
        assert got.predicted == single.predicted
        assert got.entropy == single.entropy


def test_leave_one_out_excludes_matching_id():
    vectors = [fv([0.0, 0.0], "a", "p0"), fv([1.0, 0.0], "a", "p1"),
               fv([5.0, 0.0], "b", "p2")]
    ref = build_reference(vectors)
    included = classify_batch(ref, [vectors[0]])[0]
    excluded = classify_batch(ref, [vectors[0]], leave_one_out=True)[0]
    assert np.exp(included.log_distances[0]) == 0.0
    assert abs(np.exp(excluded.log_distances[0]) - 1.0) <= 1e-12


def test_posterior_normalization_across_dims():
    rng = np.random.default_rng(4)
    for dim in (31, 91, 171):
        for _ in range(5):
            d = 10.0 ** rng.uniform(-6, 3, size=3)
            pts = np.zeros((3, dim))
            for j in range(3):
                pts[j, j] = d[j]
            ref = build_reference([fv(pts[0], "a"), fv(pts[1], "b"), fv(pts[2], "c")])
            post = posterior(ref, np.zeros(dim))
            assert abs(post.probabilities.sum() - 1.0) <= 1e-12
            assert np.all(post.probabilities >= 0.0)


def test_posterior_monotone_in_distance():
    dim = 9
    base = 1.5
    p_prev = 0.0
    for d1 in (1.4, 1.0, 0.6, 0.3):
        a = np.zeros(dim); a[0] = d1
        b = np.zeros(dim); b[1] = base
        ref = build_reference([fv(a, "a"), fv(b, "b")])
        p = posterior(ref, np.zeros(dim)).probabilities[0]
        assert p >= p_prev
        p_prev = p


def test_posterior_sharpens_with_dimension():
    p_prev = 0.0
    for dim in (2, 31, 91, 171):
        a = np.zeros(dim); a[0] = 1.0
        b = np.zeros(dim); b[1] = 2.0
        ref = build_reference([fv(a, "a"), fv(b, "b")])
        p = posterior(ref, np.zeros(dim)).probabilities[0]
        assert p >= p_prev
        p_prev = p


def test_class_permutation_equivariance():
    rng = np.random.default_rng(5)
    pts = rng.standard_normal((6, 4))
    labels = ["a", "a", "b", "b", "c", "c"]
    query = rng.standard_normal(4)
    ref = build_reference([fv(p, l) for p, l in zip(pts, labels)])
    post = posterior(ref, query)
    order = [4, 5, 2, 3, 0, 1]  # classes now appear as c, b, a
    ref2 = build_reference([fv(pts[i], labels[i]) for i in order])
    post2 = posterior(ref2, query)
    for cls in ("a", "b", "c"):
        i, j = ref.classes.index(cls), ref2.classes.index(cls)
        assert post.probabilities[i] == post2.probabilities[j]
    assert post.predicted == post2.predicted


def test_log_space_matches_naive_for_benign_distances():
    rng = np.random.default_rng(6)
    for dim in (2, 3, 5):
        d = rng.uniform(0.1, 10.0, size=3)
        pts = np.zeros((3, dim))
        pts[0, 0], pts[1, 1 % dim], pts[2, 2 % dim] = d[0], d[1], d[2]
        ref = build_reference([fv(pts[0], "a"), fv(pts[1], "b"), fv(pts[2], "c")])
        post = posterior(ref, np.zeros(dim))
        dist = np.exp(post.log_distances)
        naive = dist ** (-dim) / (dist ** (-dim)).sum()
        np.testing.assert_allclose(post.probabilities, naive, atol=1e-10)


def test_reference_csv_and_posterior_csv(tmp_path):
    rng = np.random.default_rng(7)
    vectors = [fv(rng.uniform(0.1, 1.0, 4), ("defect_free", "dirt")[i % 2], f"p{i}")
               for i in range(10)]
    feats = tmp_path / "ref.csv"
    write_features_csv(vectors, feats)
    ref = load_reference_csv(feats)
    assert ref.per_class_counts == {"defect_free": 5, "dirt": 5}

    posts = classify_batch(ref, vectors)
    out = tmp_path / "posteriors.csv"
    write_posteriors_csv(posts, ref.classes, out)
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 10
    assert rows[0]["predicted"] == posts[0].predicted
    got = [float(rows[0][f"p_{c}"]) for c in ref.classes]
    np.testing.assert_array_equal(got, posts[0].probabilities)


def test_unlabeled_reference_rejected():
    with pytest.raises(DataError):
        build_reference([fv([0.0], None), fv([1.0], "b")])


def test_classify_batch_reports_bad_query_index():
    ref = simple_ref()
    queries = [fv([0.5, 0.5], None, "ok"), fv([1.0, 2.0, 3.0], None, "bad")]
    with pytest.raises(DimensionMismatchError, match="query 1"):
        classify_batch(ref, queries)
