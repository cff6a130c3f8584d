import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sibow.encoding import CodeMatrix, LlcParams, VisualCode, encode_image
from sibow.errors import CompatibilityError
from sibow.pooling import (
    POOLING_IDS,
    FeatureMatrix,
    ImageFeature,
    PooledVector,
    featurize,
    features_from_bytes,
    features_from_csv,
    features_to_bytes,
    features_to_csv,
    normalize,
    pool,
)


def vq_codes(hot, M):
    return CodeMatrix.from_codes([VisualCode(np.array([h]), np.array([1.0]), M) for h in hot], M, "vq")


def test_sum_and_max_pooling():
    codes = vq_codes([1, 1, 2], 4)
    assert pool(codes, "sum").values.tolist() == [0, 2, 1, 0]
    assert pool(codes, "max").values.tolist() == [0, 1, 1, 0]


def test_empty_codes_pool_to_flagged_zero():
    empty = CodeMatrix.from_codes([], 5, "vq")
    for mode in ("sum", "max"):
        q = pool(empty, mode)
        assert q.degenerate and np.all(q.values == 0) and q.values.size == 5
    for pid in POOLING_IDS:
        f = featurize(empty, pid)
        assert f.degenerate and np.all(f.values == 0)


def test_l2():
    v, deg = normalize(PooledVector(np.array([3.0, 4.0])), "l2")
    assert v.tolist() == [0.6, 0.8] and not deg


def test_vq_ltf():
    v, _ = normalize(PooledVector(np.array([10.0, 0.0, 1.0]), "vq"), "ltf")
    assert v.tolist() == [2.0, 0.0, 1.0]


def test_llc_ltf_four_steps():
    v, _ = normalize(PooledVector(np.array([-0.2, 0.05, 0.5]), "llc"), "ltf")
    np.testing.assert_allclose(v, [0.0, 1.0, 2.0], atol=1e-12)


def test_llc_ltf_without_positive_entries():
    v, deg = normalize(PooledVector(np.array([-1.0, 0.0]), "llc"), "ltf")
    assert deg and v.tolist() == [0.0, 0.0]


def test_zero_vector_guard():
    for mode in ("sum", "l2"):
        v, deg = normalize(PooledVector(np.zeros(3)), mode)
        assert deg and v.tolist() == [0, 0, 0]


@settings(max_examples=60, deadline=None)
@given(hot=st.lists(st.integers(0, 9), min_size=1, max_size=40), seed=st.integers(0, 1000))
def test_vq_histogram_properties(hot, seed):
    codes = vq_codes(hot, 10)
    q = pool(codes, "sum").values
    assert np.all(q == np.round(q)) and q.sum() == len(hot)
    assert featurize(codes, "sum-sum").values.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.linalg.norm(featurize(codes, "sum-L2").values) == pytest.approx(1.0, abs=1e-9)
    # permutation invariance
    perm = np.random.default_rng(seed).permutation(len(hot))
    shuffled = vq_codes([hot[i] for i in perm], 10)
    for pid in POOLING_IDS:
        np.testing.assert_array_equal(featurize(codes, pid).values, featurize(shuffled, pid).values)


@settings(max_examples=60, deadline=None)
@given(a=st.floats(1e-3, 1e6), b=st.floats(1e-3, 1e6))
def test_ltf_monotone(a, b):
    hi, lo = max(a, b), min(a, b)
    v, _ = normalize(PooledVector(np.array([hi, lo]), "vq"), "ltf")
    assert v[0] >= v[1]


def test_llc_sum_and_max_paths_differ_but_are_valid():
    rng = np.random.default_rng(0)
    B = rng.normal(size=(6, 4))
    codes = encode_image(rng.normal(size=(12, 4)), B, "llc", LlcParams(lam=1e-2))
    s, m = featurize(codes, "sum-L2", "llc"), featurize(codes, "max-L2", "llc")
    assert np.linalg.norm(s.values) == pytest.approx(1.0) and np.linalg.norm(m.values) == pytest.approx(1.0)
    dense = codes.matrix.toarray()
    np.testing.assert_allclose(s.values, dense.sum(0) / np.linalg.norm(dense.sum(0)))
    np.testing.assert_allclose(m.values, dense.max(0) / np.linalg.norm(dense.max(0)))


def test_feature_matrix_and_artifacts(tmp_path):
    feats = [
        ImageFeature(np.array([0.5, 0.25, 0.25]), "sum-sum", "a", 1),
        ImageFeature(np.array([0.0, 0.0, 1.0]), "sum-sum", "b", None),
    ]
    fm = FeatureMatrix.from_features(feats)
    assert fm.labels.tolist() == [1, 0] and fm.M == 3
    back = features_from_bytes(features_to_bytes(fm))
    assert back.values.tobytes() == fm.values.tobytes()
    assert back.image_ids == ["a", "b"] and back.pooling_id == "sum-sum"
    features_to_csv(fm, tmp_path / "f.csv")
    csv_back = features_from_csv(tmp_path / "f.csv", "sum-sum")
    assert csv_back.values.tobytes() == fm.values.tobytes()
    assert csv_back.labels.tolist() == [1, 0]
    assert fm.subset([1]).image_ids == ["b"]


def test_mixed_pooling_refused():
    feats = [ImageFeature(np.ones(2), "sum-sum"), ImageFeature(np.ones(2), "max-L2")]
    with pytest.raises(CompatibilityError):
        FeatureMatrix.from_features(feats)
