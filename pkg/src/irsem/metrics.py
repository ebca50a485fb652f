"""Retrieval metrics over cosine similarity of feature vectors.

Similarity ties are broken in favour of the lower candidate index.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Mapping, Sequence

import numpy as np


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    return (a / np.where(na == 0, 1, na)) @ (b / np.where(nb == 0, 1, nb)).T


@dataclass
class RecallReport:
    value: float
    predicted: dict[int, int]


def recall_at_1_from_similarity(sim: np.ndarray, mapping: Mapping[int, int],
                                candidates: Sequence[int] | None = None) -> RecallReport:
    """Fraction of ground-truth pairs whose best-scoring candidate is the true match.

    ``sim[i, j]`` scores query i against target j; ``candidates`` limits the
    targets searched (all of them by default).
    """
    if not mapping:
        raise ValueError("empty ground-truth mapping")
    if len(set(mapping.values())) != len(mapping):
        raise ValueError("ground-truth mapping is not injective")
    cols = np.arange(sim.shape[1]) if candidates is None else np.asarray(sorted(candidates))
    if cols.size == 0:
        raise ValueError("no candidates")
    predicted = {}
    for i in mapping:
        row = sim[i, cols]
        predicted[i] = int(cols[int(np.argmax(row))])  # first maximum = lowest index
    hits = sum(predicted[i] == j for i, j in mapping.items())
    return RecallReport(hits / len(mapping), predicted)


def recall_at_1(feats1: np.ndarray, feats2: np.ndarray, mapping: Mapping[int, int],
                candidates: Sequence[int] | None = None) -> float:
    return recall_at_1_from_similarity(cosine_matrix(feats1, feats2), mapping, candidates).value


@dataclass
class MapReport:
    value: float
    precision: dict[int, float]
    skipped: list[int]


def map_at_r_from_similarity(sim: np.ndarray, labels: Sequence[Hashable]) -> MapReport:
    """Mean over queries of |top-R_i retrieved ∩ same-class| / R_i.

    R_i is the number of other samples sharing query i's label; queries whose
    class is a singleton are skipped.
    """
    n = len(labels)
    if sim.shape != (n, n):
        raise ValueError("similarity matrix does not match the labels")
    lab = list(labels)
    precision, skipped = {}, []
    for i in range(n):
        others = [j for j in range(n) if j != i]
        same = {j for j in others if lab[j] == lab[i]}
        if not same:
            skipped.append(i)
            continue
        order = sorted(others, key=lambda j: (-sim[i, j], j))
        top = order[:len(same)]
        precision[i] = len(same.intersection(top)) / len(same)
    if not precision:
        raise ValueError("every class is a singleton")
    return MapReport(float(np.mean(list(precision.values()))), precision, skipped)


def map_at_r(feats: np.ndarray, labels: Sequence[Hashable]) -> float:
    return map_at_r_from_similarity(cosine_matrix(feats, feats), labels).value


# ---------------------------------------------------------------- feature files

@dataclass
class FeatureSet:
    ids: list[str]
    labels: list[str]
    vectors: np.ndarray

    def subset(self, prefix: str) -> "FeatureSet":
        keep = [k for k, i in enumerate(self.ids) if i.split("/", 1)[0] == prefix]
        return FeatureSet([self.ids[k] for k in keep], [self.labels[k] for k in keep], self.vectors[keep])


def write_features(path: str | Path, ids: Sequence[str], labels: Sequence[str], vectors: np.ndarray) -> None:
    """One line per vector: ``id<TAB>label<TAB>space-separated floats``."""
    with open(path, "w", encoding="utf-8") as f:
        for i, l, v in zip(ids, labels, np.asarray(vectors, dtype=np.float64)):
            f.write(f"{i}\t{l}\t{' '.join(repr(float(x)) for x in v)}\n")


def read_features(path: str | Path) -> FeatureSet:
    ids, labels, rows = [], [], []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected id, label and vector")
            ids.append(parts[0])
            labels.append(parts[1])
            rows.append([float(x) for x in parts[2].split()])
    if rows and len({len(r) for r in rows}) != 1:
        raise ValueError(f"{path}: vectors differ in length")
    return FeatureSet(ids, labels, np.array(rows, dtype=np.float64).reshape(len(rows), -1))


def label_mapping(a: FeatureSet, b: FeatureSet) -> dict[int, int]:
    """Ground truth pairing rows of ``a`` and ``b`` that share a label."""
    where = {}
    for j, l in enumerate(b.labels):
        if l in where:
            raise ValueError(f"label {l!r} occurs twice in the target set")
        where[l] = j
    return {i: where[l] for i, l in enumerate(a.labels) if l in where}
