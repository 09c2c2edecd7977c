"""Evaluation metrics, class merging, stratified splits, repeated runs.

Beyond the usual counting rates (MER, FPR, FNR) the module computes their
probability-based analogues: each point contributes its posterior
probability of being wrong rather than a 0/1 indicator, so a confident
correct classifier scores near zero while a hesitant one is penalized even
when the argmax is right. Per-point Shannon entropies of the posterior
vectors average into a single uncertainty number for a run.

Defect detection reports the binary view: the crater and dirt posteriors
are merged into one defect probability, with false negatives counted on
true defects and false positives on true defect-free patches.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classifier import PosteriorVector, build_reference, classify_batch
from .errors import DataError
from .features import FeatureVector

DEFECT = "defect"
DEFECT_FREE_BINARY = "defect_free"


@dataclass
class BinaryPosterior:
    """Posterior collapsed to defect vs defect-free."""

    p_defect: float
    p_defect_free: float
    predicted_defect: bool
    entropy: float
    true_defect: bool | None = None


def merge_defect_classes(post: PosteriorVector, classes: tuple[str, ...],
                         defect_classes: set[str]) -> BinaryPosterior:
    """Collapse a multi-class posterior into (p_defect, p_defect_free).

    defect_classes must be a nonempty proper subset of the class set; the
    merged probabilities sum to the original total, and the binary label is
    the argmax with ties going to defect.
    """
    cl = set(classes)
    if not defect_classes or not defect_classes < cl:
        raise DataError(
            f"defect classes {sorted(defect_classes)} must be a nonempty proper "
            f"subset of {sorted(cl)}")
    mask = np.array([c in defect_classes for c in classes])
    p_def = float(post.probabilities[mask].sum())
    p_free = float(post.probabilities[~mask].sum())
    p = np.array([p_def, p_free])
    ent = float(-(p[p > 0] * np.log(p[p > 0])).sum())
    true_defect = None
    if post.true_label is not None:
        true_defect = post.true_label in defect_classes
    return BinaryPosterior(p_defect=p_def, p_defect_free=p_free,
                           predicted_defect=p_def >= p_free, entropy=ent,
                           true_defect=true_defect)


def probability_metrics(is_defect: list[bool], p_defect: list[float]):
    """(prob_mer, prob_fpr, prob_fnr) from per-point defect probabilities.

    prob_mer averages the per-point misclassification probability over all
    points; prob_fnr only over true defects and prob_fpr only over true
    defect-free points. A rate whose class is absent is returned as None.
    """
    if len(is_defect) != len(p_defect):
        raise DataError("labels and posteriors must have equal length")
    if not is_defect:
        raise DataError("empty input")
    truth = np.asarray(is_defect, dtype=bool)
    p1 = np.asarray(p_defect, dtype=float)
    pm = np.where(truth, 1.0 - p1, p1)
    prob_mer = float(pm.mean())
    prob_fnr = float((1.0 - p1[truth]).mean()) if truth.any() else None
    prob_fpr = float(p1[~truth].mean()) if (~truth).any() else None
    return prob_mer, prob_fpr, prob_fnr


def hard_metrics(is_defect: list[bool], predicted_defect: list[bool]):
    """Conventional counting rates (mer, fpr, fnr); absent classes give None."""
    if len(is_defect) != len(predicted_defect):
        raise DataError("labels and predictions must have equal length")
    if not is_defect:
        raise DataError("empty input")
    truth = np.asarray(is_defect, dtype=bool)
    pred = np.asarray(predicted_defect, dtype=bool)
    mer = float((truth != pred).mean())
    fnr = float((~pred[truth]).mean()) if truth.any() else None
    fpr = float(pred[~truth].mean()) if (~truth).any() else None
    return mer, fpr, fnr


def average_entropy(posteriors) -> float:
    """Mean of per-point Shannon entropies (non-negative)."""
    if not posteriors:
        raise DataError("empty input")
    return float(np.mean([p.entropy for p in posteriors]))


def one_against_all(posteriors: list[PosteriorVector], classes: tuple[str, ...],
                    target_class: str):
    """(prob_mer, prob_fpr, prob_fnr) treating target_class as the positive."""
    merged = [merge_defect_classes(p, classes, {target_class}) for p in posteriors]
    truth = [m.true_defect for m in merged]
    if any(t is None for t in truth):
        raise DataError("one_against_all needs true labels on every posterior")
    return probability_metrics(truth, [m.p_defect for m in merged])


def stratified_split(labels: list[str], train_fraction: float,
                     seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic per-class split; returns sorted (train, validation) indices.

    Each class contributes round(n_j * train_fraction) points to training
    (round half up); the remainder goes to validation.
    """
    if not 0.0 < train_fraction < 1.0:
        raise DataError(f"train_fraction must be in (0, 1), got {train_fraction}")
    labels_arr = np.asarray(labels)
    classes = []
    for lab in labels_arr:
        if lab not in classes:
            classes.append(lab)
    rng = np.random.default_rng(seed)
    train_idx: list[np.ndarray] = []
    val_idx: list[np.ndarray] = []
    for c in classes:
        idx = np.flatnonzero(labels_arr == c)
        if len(idx) < 2:
            raise DataError(f"class {c!r} has {len(idx)} member(s); need >= 2")
        k = int(math.floor(len(idx) * train_fraction + 0.5))
        perm = rng.permutation(idx)
        train_idx.append(perm[:k])
        val_idx.append(perm[k:])
    return (np.sort(np.concatenate(train_idx)).astype(int),
            np.sort(np.concatenate(val_idx)).astype(int))


@dataclass
class MetricSeries:
    """Per-run values of one metric with mean and standard error."""

    runs: list[float | None] = field(default_factory=list)

    @property
    def values(self) -> list[float]:
        return [v for v in self.runs if v is not None]

    @property
    def mean(self) -> float | None:
        vals = self.values
        return float(np.mean(vals)) if vals else None

    @property
    def se(self) -> float | None:
        vals = self.values
        if len(vals) < 2:
            return None
        return float(np.std(vals, ddof=1) / math.sqrt(len(vals)))


BINARY_METRICS = ("mer", "fpr", "fnr", "prob_mer", "prob_fpr", "prob_fnr",
                  "avg_entropy")
THREE_CLASS_METRICS = ("mer_multiclass", "prob_mer_multiclass",
                       "avg_entropy_multiclass")


@dataclass
class EvaluationReport:
    """Aggregated result of repeated stratified evaluation runs."""

    classes: tuple[str, ...]
    defect_classes: tuple[str, ...]
    train_fraction: float
    seeds: tuple[int, ...]
    n_total: int
    n_defect: int
    n_defect_free: int
    metrics: dict[str, MetricSeries]

    def to_json_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "defect_classes": list(self.defect_classes),
            "train_fraction": self.train_fraction,
            "seeds": list(self.seeds),
            "counts": {
                "n_total": self.n_total,
                "n_defect": self.n_defect,
                "n_defect_free": self.n_defect_free,
            },
            "metrics": {
                name: {"runs": series.runs, "mean": series.mean, "se": series.se}
                for name, series in self.metrics.items()
            },
        }

    def write_json(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "statistic", "value"])
            for name, series in self.metrics.items():
                for i, v in enumerate(series.runs, start=1):
                    writer.writerow([name, f"run_{i}", "" if v is None else repr(v)])
                mean, se = series.mean, series.se
                writer.writerow([name, "mean", "" if mean is None else repr(mean)])
                writer.writerow([name, "se", "" if se is None else repr(se)])


def evaluate_single_run(features: list[FeatureVector], seed: int,
                        train_fraction: float,
                        defect_classes: set[str]) -> dict[str, float | None]:
    """One stratified split, classify the validation set, compute all metrics."""
    labels = [fv.label or "" for fv in features]
    train_idx, val_idx = stratified_split(labels, train_fraction, seed)
    ref = build_reference([features[i] for i in train_idx])
    queries = [features[i] for i in val_idx]
    posts = classify_batch(ref, queries)

    true_labels = [features[i].label for i in val_idx]
    mer_multi = float(np.mean([p.predicted != t for p, t in zip(posts, true_labels)]))
    class_pos = {c: j for j, c in enumerate(ref.classes)}
    p_true = [float(p.probabilities[class_pos[t]]) if t in class_pos else 0.0
              for p, t in zip(posts, true_labels)]
    prob_mer_multi = float(np.mean([1.0 - pt for pt in p_true]))

    merged = [merge_defect_classes(p, ref.classes, defect_classes) for p in posts]
    truth = [t in defect_classes for t in true_labels]
    mer, fpr, fnr = hard_metrics(truth, [m.predicted_defect for m in merged])
    prob_mer, prob_fpr, prob_fnr = probability_metrics(
        truth, [m.p_defect for m in merged])
    return {
        "mer": mer, "fpr": fpr, "fnr": fnr,
        "prob_mer": prob_mer, "prob_fpr": prob_fpr, "prob_fnr": prob_fnr,
        "avg_entropy": average_entropy(merged),
        "mer_multiclass": mer_multi,
        "prob_mer_multiclass": prob_mer_multi,
        "avg_entropy_multiclass": average_entropy(posts),
    }


def repeated_evaluation(features: list[FeatureVector], seeds: list[int],
                        train_fraction: float = 0.7,
                        defect_classes: set[str] | None = None,
                        threads: int = 1) -> EvaluationReport:
    """Run split -> classify -> metrics once per seed and aggregate.

    Splits are pure functions of their seed, so runs are independent and may
    execute in parallel (threads > 1) without changing the result. Per-run
    metric values are kept alongside across-run means and standard errors.
    """
    if not seeds:
        raise DataError("need at least one seed")
    if defect_classes is None:
        defect_classes = {"crater", "dirt"}
    labels = [fv.label or "" for fv in features]
    classes: list[str] = []
    for lab in labels:
        if lab not in classes:
            classes.append(lab)
    present_defects = {c for c in classes if c in defect_classes}

    series: dict[str, MetricSeries] = {
        name: MetricSeries() for name in BINARY_METRICS + THREE_CLASS_METRICS}
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(evaluate_single_run, features, seed,
                                   train_fraction, present_defects)
                       for seed in seeds]
            results = []
            for run, fut in enumerate(futures):
                try:
                    results.append(fut.result())
                except Exception as exc:
                    raise DataError(f"evaluation run {run} (seed {seeds[run]}) "
                                    f"failed: {exc}") from exc
    else:
        results = []
        for run, seed in enumerate(seeds):
            try:
                results.append(evaluate_single_run(features, seed,
                                                   train_fraction,
                                                   present_defects))
            except Exception as exc:
                raise DataError(f"evaluation run {run} (seed {seed}) failed: "
                                f"{exc}") from exc
    for result in results:
        for name, value in result.items():
            series[name].runs.append(value)

    _, val_idx = stratified_split(labels, train_fraction, seeds[0])
    val_labels = [labels[i] for i in val_idx]
    n_defect = sum(1 for lab in val_labels if lab in present_defects)
    return EvaluationReport(
        classes=tuple(classes), defect_classes=tuple(sorted(present_defects)),
        train_fraction=train_fraction, seeds=tuple(seeds),
        n_total=len(val_labels), n_defect=n_defect,
        n_defect_free=len(val_labels) - n_defect, metrics=series)
