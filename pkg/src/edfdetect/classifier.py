"""Probabilistic nearest-neighbour classification over feature vectors.

For a query point the minimum Euclidean distance D_j to each class is
turned into posterior class probabilities proportional to D_j^(-m), where
m is the feature dimension. This is the density estimate one gets from the
volume of the smallest ball around the query that reaches class j (ball
volume a_m * r^m; the dimension constant a_m and the class counts cancel
against class priors proportional to those counts).

With m up to 171, D^(-m) overflows double precision for quite ordinary
distances, so all posterior arithmetic runs in log space. A query at
exactly zero distance from one or more classes gets probability mass 1
split uniformly over those classes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from .errors import DataError, DimensionMismatchError, SingleClassError
from .features import FeatureVector, read_features_csv


@dataclass
class LabeledFeatureSet:
    """Immutable reference sample: vectors, labels, and class bookkeeping."""

    vectors: np.ndarray                 # (N, m)
    labels: tuple[str, ...]             # (N,)
    classes: tuple[str, ...]            # (K,) in order of first appearance
    patch_ids: tuple[str, ...]          # (N,)
    _by_class: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def per_class_counts(self) -> dict[str, int]:
        return {c: len(idx) for c, idx in self._by_class.items()}

    def class_rows(self, label: str) -> np.ndarray:
        return self._by_class[label]


@dataclass
class PosteriorVector:
    """Posterior class probabilities for one query.

    log_probabilities carries the exact log-space values; probabilities is
    their exp, which flushes to 0.0 where the true mass lies below the
    smallest double (e.g. a distance ratio of 1e6 at dimension 91).
    """

    probabilities: np.ndarray
    predicted: str
    entropy: float
    log_probabilities: np.ndarray
    log_distances: np.ndarray
    patch_id: str = ""
    true_label: str | None = None


def build_reference(vectors: list[FeatureVector]) -> LabeledFeatureSet:
    """Validate labeled feature vectors and freeze them as a reference set."""
    if not vectors:
        raise DataError("empty reference set")
    dim = vectors[0].dim
    labels = []
    for fv in vectors:
        if fv.dim != dim:
            raise DimensionMismatchError(
                f"feature vector {fv.patch_id!r} has dim {fv.dim}, expected {dim}")
        if fv.label is None:
            raise DataError(f"reference vector {fv.patch_id!r} is unlabeled")
        labels.append(fv.label)

    classes: list[str] = []
    for lab in labels:
        if lab not in classes:
            classes.append(lab)
    if len(classes) < 2:
        raise SingleClassError(f"need >= 2 classes, got {classes}")

    arr = np.array([fv.tau for fv in vectors], dtype=float)
    label_arr = np.array(labels)
    by_class = {c: np.flatnonzero(label_arr == c) for c in classes}
    return LabeledFeatureSet(vectors=arr, labels=tuple(labels),
                             classes=tuple(classes),
                             patch_ids=tuple(fv.patch_id for fv in vectors),
                             _by_class=by_class)


def _min_distances(ref: LabeledFeatureSet, queries: np.ndarray,
                   exclude_ids: list[str] | None = None) -> np.ndarray:
    """(n_queries, K) matrix of per-class minimum Euclidean distances."""
    if queries.ndim != 2 or queries.shape[1] != ref.dim:
        raise DimensionMismatchError(
            f"queries must have shape (n, {ref.dim}), got {queries.shape}")
    full = cdist(queries, ref.vectors)
    if exclude_ids is not None:
        ids = np.array(ref.patch_ids)
        for i, qid in enumerate(exclude_ids):
            if qid:
                full[i, ids == qid] = np.inf
    out = np.empty((queries.shape[0], len(ref.classes)))
    for j, c in enumerate(ref.classes):
        out[:, j] = full[:, ref.class_rows(c)].min(axis=1)
    return out


def min_class_distance(ref: LabeledFeatureSet, query: np.ndarray) -> np.ndarray:
    """Minimum Euclidean distance from the query to each class, in class order."""
    query = np.asarray(query, dtype=float)
    if query.shape != (ref.dim,):
        raise DimensionMismatchError(
            f"query must have shape ({ref.dim},), got {query.shape}")
    return _min_distances(ref, query[None, :])[0]


def _entropy(p: np.ndarray) -> float:
    pos = p[p > 0.0]
    return float(-(pos * np.log(pos)).sum())


def _posterior_from_distances(dist: np.ndarray, dim: int):
    """Map per-class min distances to (probabilities, log p, log distances)."""
    with np.errstate(divide="ignore"):
        log_d = np.log(dist)
    if (dist == 0.0).any():
        p = (dist == 0.0).astype(float)
        p /= p.sum()
        with np.errstate(divide="ignore"):
            log_p = np.log(p)
        return p, log_p, log_d
    ell = -dim * log_d
    log_p = ell - logsumexp(ell)
    p = np.exp(log_p)
    total = p.sum()
    if total > 0:
        p = p / total
    return p, log_p, log_d


def posterior(ref: LabeledFeatureSet, query: np.ndarray,
              patch_id: str = "", true_label: str | None = None) -> PosteriorVector:
    """Posterior class probabilities for one query vector."""
    dist = min_class_distance(ref, query)
    p, log_p, log_d = _posterior_from_distances(dist, ref.dim)
    k = int(np.argmax(p))
    return PosteriorVector(probabilities=p, predicted=ref.classes[k],
                           entropy=_entropy(p), log_probabilities=log_p,
                           log_distances=log_d, patch_id=patch_id,
                           true_label=true_label)


def classify_batch(ref: LabeledFeatureSet,
                   queries: list[FeatureVector] | np.ndarray,
                   leave_one_out: bool = False) -> list[PosteriorVector]:
    """Posterior for every query, order preserving.

    With leave_one_out=True, a reference point whose patch_id equals the
    query's is excluded from the distance scan (training-set diagnostics).
    """
    if isinstance(queries, np.ndarray):
        arr = np.asarray(queries, dtype=float)
        if arr.size == 0:
            return []
        ids = [""] * arr.shape[0]
        true_labels: list[str | None] = [None] * arr.shape[0]
    else:
        if not queries:
            return []
        for i, fv in enumerate(queries):
            if fv.dim != ref.dim:
                raise DimensionMismatchError(
                    f"query {i} ({fv.patch_id!r}) has dim {fv.dim}, "
                    f"reference dim is {ref.dim}")
        arr = np.array([fv.tau for fv in queries], dtype=float)
        ids = [fv.patch_id for fv in queries]
        true_labels = [fv.label for fv in queries]

    dists = _min_distances(ref, arr, exclude_ids=ids if leave_one_out else None)
    out = []
    for i in range(arr.shape[0]):
        p, log_p, log_d = _posterior_from_distances(dists[i], ref.dim)
        k = int(np.argmax(p))
        out.append(PosteriorVector(probabilities=p, predicted=ref.classes[k],
                                   entropy=_entropy(p), log_probabilities=log_p,
                                   log_distances=log_d, patch_id=ids[i],
                                   true_label=true_labels[i]))
    return out


def load_reference_csv(path: str | Path) -> LabeledFeatureSet:
    """Build a reference set from a features CSV (labeled rows only)."""
    vectors = [fv for fv in read_features_csv(path) if fv.label]
    if not vectors:
        raise DataError(f"{path}: no labeled feature vectors")
    return build_reference(vectors)


def write_posteriors_csv(posteriors: list[PosteriorVector],
                         classes: tuple[str, ...], path: str | Path) -> None:
    """Serialize posteriors: patch_id, true_label, predicted, p_<class>.., entropy."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patch_id", "true_label", "predicted"]
                        + [f"p_{c}" for c in classes] + ["entropy"])
        for pv in posteriors:
            writer.writerow([pv.patch_id, pv.true_label or "", pv.predicted]
                            + [repr(float(p)) for p in pv.probabilities]
                            + [repr(float(pv.entropy))])
