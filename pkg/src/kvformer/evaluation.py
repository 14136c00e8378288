# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:

"""
Classification metrics and aggregation over seeds.
"""
import math
from enum import Enum
from typing import Any, Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
from attrs import frozen

from kvformer.document import Array, Document
from kvformer.inference import ClassifyResult, DecodeOptions, InferenceError, classify_batch
from kvformer.model import Transformer
from kvformer.tokenizer import Vocabulary


@frozen
class EvaluationError(Exception):
    """An error evaluating a model or aggregating results."""

    message: str


class Task(Enum):
    SINGLE = "single"
    MULTI = "multi"


@frozen
class MetricsReport:
    """Scores over a test corpus.

    Multi-label precision, recall and F1 are micro-averaged over label indicators; the
    samples-averaged variants (mean over instances) are reported alongside them.
    """

    task: Task
    count: int
    correct: int
    discarded: int
    accuracy: float
    precision: Optional[float] = None
    recall: Optional[float] = None
    f1: Optional[float] = None
    samples_precision: Optional[float] = None
    samples_recall: Optional[float] = None
    samples_f1: Optional[float] = None


@frozen
class Summary:
    """Mean and sample standard deviation of one metric within one group."""

    group: str
    metric: str
    count: int
    mean: float
    std: Optional[float]  # None for a single value


def _ratio(numerator: float, denominator: float) -> float:
    return numerator / denominator if denominator else 0.0


def f1_score(precision: float, recall: float) -> float:
    return _ratio(2.0 * precision * recall, precision + recall)


def label_set(value: Optional[Document]) -> FrozenSet[Document]:
    """The labels of a value: the items of an array, or the value itself."""
    if value is None:
        return frozenset()
    if isinstance(value, Array):
        return frozenset(value.items)
    return frozenset([value])


def micro_prf(pairs: Sequence[Tuple[FrozenSet[Document], FrozenSet[Document]]]) -> Tuple[float, float, float]:
    """Micro-averaged precision, recall and F1 over (truth, prediction) label sets."""
    true_positive = sum(len(truth & predicted) for truth, predicted in pairs)
    false_positive = sum(len(predicted - truth) for truth, predicted in pairs)
    false_negative = sum(len(truth - predicted) for truth, predicted in pairs)
    precision = _ratio(true_positive, true_positive + false_positive)
    recall = _ratio(true_positive, true_positive + false_negative)
    return precision, recall, f1_score(precision, recall)


def samples_prf(pairs: Sequence[Tuple[FrozenSet[Document], FrozenSet[Document]]]) -> Tuple[float, float, float]:
    """Precision, recall and F1 computed per instance, then averaged."""
    if not pairs:
        return 0.0, 0.0, 0.0
    scores = []
    for truth, predicted in pairs:
        precision = _ratio(len(truth & predicted), len(predicted))
        recall = _ratio(len(truth & predicted), len(truth))
        scores.append((precision, recall, f1_score(precision, recall)))
    means = np.mean(np.array(scores), axis=0)
    return float(means[0]), float(means[1]), float(means[2])


def score(results: Sequence[ClassifyResult], task: Task) -> MetricsReport:
    """Score classification results; discarded instances count as incorrect."""
    count = len(results)
    correct = sum(1 for result in results if result.correct)
    discarded = sum(1 for result in results if result.prediction is None)
    accuracy = _ratio(correct, count)
    if task is Task.SINGLE:
        return MetricsReport(task=task, count=count, correct=correct, discarded=discarded, accuracy=accuracy)
    pairs = [(label_set(result.truth), label_set(result.prediction)) for result in results]
    precision, recall, f1 = micro_prf(pairs)
    samples_precision, samples_recall, samples_f1 = samples_prf(pairs)
    return MetricsReport(
        task=task,
        count=count,
        correct=correct,
        discarded=discarded,
        accuracy=accuracy,
        precision=precision,
        recall=recall,
        f1=f1,
        samples_precision=samples_precision,
        samples_recall=samples_recall,
        samples_f1=samples_f1,
    )


def evaluate(
    model: Transformer,
    vocab: Vocabulary,
    docs: Sequence[Document],
    target_key: str,
    task: Task,
    options: Optional[DecodeOptions] = None,
    batch_size: int = 64,
) -> Tuple[MetricsReport, List[ClassifyResult]]:
    """Predict the target key of every test document and score the predictions."""
    if not docs:
        raise EvaluationError("Cannot evaluate on an empty corpus")
    try:
        results = classify_batch(model, vocab, docs, target_key, options or DecodeOptions(), batch_size)
    except InferenceError as e:
        raise EvaluationError(e.message) from e
    return score(results, task), results


def mean_std(values: Sequence[float]) -> Tuple[float, Optional[float]]:
    """Mean and sample standard deviation (n-1 denominator) of the values."""
    if not values:
        raise EvaluationError("Cannot aggregate an empty list of values")
    array = np.array(values, dtype=np.float64)
    std = float(np.std(array, ddof=1)) if len(values) > 1 else None
    return float(np.mean(array)), std


def aggregate(rows: Sequence[Dict[str, Any]], group_key: str, metrics: Sequence[str]) -> List[Summary]:
    """Summarize each metric per group, skipping missing values; groups keep first-seen order."""
    groups: Dict[str, List[Dict[str, Any]]] = {}
    for row in rows:
        groups.setdefault(str(row[group_key]), []).append(row)
    summaries = []
    for group, members in groups.items():
        for metric in metrics:
            values = [float(row[metric]) for row in members if row.get(metric) is not None]
            values = [value for value in values if not math.isnan(value)]
            if values:
                mean, std = mean_std(values)
                summaries.append(Summary(group=group, metric=metric, count=len(values), mean=mean, std=std))
    return summaries
