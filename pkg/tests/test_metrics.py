import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from irsem.metrics import (
    FeatureSet, cosine_matrix, label_mapping, map_at_r, map_at_r_from_similarity, read_features,
    recall_at_1, recall_at_1_from_similarity, write_features,
)


def brute_recall(sim, mapping):
    hits = 0
    for i, j in mapping.items():
        best, best_j = -np.inf, None
        for c in range(sim.shape[1]):
            if sim[i, c] > best:
                best, best_j = sim[i, c], c
        hits += best_j == j
    return hits / len(mapping)


def brute_map(sim, labels):
    n = len(labels)
    vals = []
    for i in range(n):
        same = [j for j in range(n) if j != i and labels[j] == labels[i]]
        if not same:
            continue
        ranked = []
        for j in range(n):
            if j == i:
                continue
            # insertion keeps earlier (lower) indices ahead on ties
            k = 0
            while k < len(ranked) and sim[i, ranked[k]] >= sim[i, j]:
                k += 1
            ranked.insert(k, j)
        top = ranked[:len(same)]
        vals.append(sum(j in same for j in top) / len(same))
    return sum(vals) / len(vals)


def test_identity_features():
    f = np.eye(5)
    assert recall_at_1(f, f, {i: i for i in range(5)}) == 1.0


def test_three_of_four():
    # rows: queries, cols: targets; query 2's best is target 3
    sim = np.array([
        [0.9, 0.1, 0.2, 0.0],
        [0.0, 0.8, 0.3, 0.1],
        [0.1, 0.2, 0.5, 0.6],
        [0.0, 0.1, 0.2, 0.7],
    ])
    r = recall_at_1_from_similarity(sim, {0: 0, 1: 1, 2: 2, 3: 3})
    assert r.value == 0.75
    assert r.predicted[2] == 3


def test_recall_errors_and_scope():
    sim = np.array([[0.1, 0.9], [0.5, 0.2]])
    with pytest.raises(ValueError):
        recall_at_1_from_similarity(sim, {})
    with pytest.raises(ValueError):
        recall_at_1_from_similarity(sim, {0: 1, 1: 1})
    assert recall_at_1_from_similarity(sim, {0: 0}).value == 0.0
    assert recall_at_1_from_similarity(sim, {0: 0}, candidates=[0]).value == 1.0


def test_recall_tie_prefers_lower_index():
    sim = np.array([[0.5, 0.5]])
    assert recall_at_1_from_similarity(sim, {0: 0}).value == 1.0


def test_map_perfect():
    feats = np.array([[1, 0], [1, 0.01], [0, 1], [0.01, 1]], dtype=float)
    assert map_at_r(feats, ["a", "a", "b", "b"]) == 1.0


def test_map_hand_enumerated():
    # samples 0,1 in class a; 2,3 in class b; sample 2 ranks above 1 for query 0
    sim = np.array([
        [1.0, 0.4, 0.6, 0.1],
        [0.4, 1.0, 0.2, 0.3],
        [0.6, 0.2, 1.0, 0.5],
        [0.1, 0.3, 0.5, 1.0],
    ])
    # R=1 for every query: q0 -> 2 (miss), q1 -> 0 (hit), q2 -> 0 (miss), q3 -> 2 (hit)
    rep = map_at_r_from_similarity(sim, ["a", "a", "b", "b"])
    assert rep.value == 0.5
    assert rep.precision == {0: 0.0, 1: 1.0, 2: 0.0, 3: 1.0}


def test_map_skips_singletons():
    sim = np.eye(3)
    rep = map_at_r_from_similarity(sim + 0.1, ["a", "a", "b"])
    assert rep.skipped == [2]
    with pytest.raises(ValueError):
        map_at_r_from_similarity(np.eye(2), ["a", "b"])


def _monotone(x):
    return np.arctan(3 * x) + x ** 3


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_recall_random(seed):
    rng = np.random.default_rng(seed)
    n1, n2 = rng.integers(1, 26), rng.integers(1, 26)
    a, b = rng.normal(size=(n1, 4)), rng.normal(size=(n2, 4))
    k = int(rng.integers(1, min(n1, n2) + 1))
    mapping = dict(zip(rng.choice(n1, k, replace=False).tolist(), rng.choice(n2, k, replace=False).tolist()))
    sim = cosine_matrix(a, b)
    got = recall_at_1_from_similarity(sim, mapping).value
    assert got == brute_recall(sim, mapping)
    assert recall_at_1_from_similarity(_monotone(sim), mapping).value == got


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_map_random(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 41))
    labels = rng.integers(0, int(rng.integers(1, 6)), size=n).tolist()
    if len(set(labels)) == n:
        labels[1] = labels[0]
    feats = rng.normal(size=(n, 3))
    sim = cosine_matrix(feats, feats)
    got = map_at_r_from_similarity(sim, labels).value
    assert abs(got - brute_map(sim, labels)) < 1e-12
    assert abs(map_at_r_from_similarity(_monotone(sim), labels).value - got) < 1e-12


def test_feature_file_round_trip(tmp_path):
    v = np.random.default_rng(0).normal(size=(3, 4))
    write_features(tmp_path / "f.tsv", ["x/a", "x/b", "y/a"], ["a", "b", "a"], v)
    fs = read_features(tmp_path / "f.tsv")
    assert fs.ids == ["x/a", "x/b", "y/a"] and np.array_equal(fs.vectors, v)
    assert label_mapping(fs.subset("x"), fs.subset("y")) == {0: 0}


def test_feature_file_errors(tmp_path):
    p = tmp_path / "bad.tsv"
    p.write_text("a\t1\n")
    with pytest.raises(ValueError):
        read_features(p)
    p.write_text("a\tl\t1 2\nb\tl\t1\n")
    with pytest.raises(ValueError):
        read_features(p)
    dup = FeatureSet(["a", "b"], ["l", "l"], np.zeros((2, 1)))
    with pytest.raises(ValueError):
        label_mapping(dup, dup)
