"""Set-overlap scoring over grouped labels and repeated-run aggregation.

A sample is scored by intersecting the annotated and predicted group-ID
sets: set precision (accuracy_s), set recall (recall_s), and their
arithmetic mean (avg). Corpus scores are macro averages over samples.
Repeated runs are reported as mean with population standard deviation,
rendered as percent with two decimals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal
from typing import AbstractSet, Iterable, Sequence, Tuple, Union

from .errors import EmptyAnnotation, EmptyCorpus
from .label_space import GroupedLabelSet

GroupSet = Union[GroupedLabelSet, AbstractSet[int]]


@dataclass(frozen=True)
class MetricResult:
    """Per-sample or corpus-level scores, all fractions in [0, 1]."""

    accuracy_s: float
    recall_s: float
    avg: float


def _ids(value: GroupSet) -> frozenset[int]:
    if isinstance(value, GroupedLabelSet):
        return value.group_ids
    return frozenset(value)


def score_pair(annotated: GroupSet, predicted: GroupSet) -> MetricResult:
    """Score one sample.

    accuracy_s = |annotated ∩ predicted| / |predicted|
    recall_s   = |annotated ∩ predicted| / |annotated|
    avg        = (accuracy_s + recall_s) / 2

    An empty prediction scores 0 on all three by convention; systems do
    occasionally emit nothing and batch scoring must not abort. An empty
    annotation is an error: annotations always exist.
    """
    ann = _ids(annotated)
    pred = _ids(predicted)
    if not ann:
        raise EmptyAnnotation("annotated label set is empty")
    if not pred:
        return MetricResult(0.0, 0.0, 0.0)
    hit = len(ann & pred)
    accuracy_s = hit / len(pred)
    recall_s = hit / len(ann)
    return MetricResult(accuracy_s, recall_s, (accuracy_s + recall_s) / 2)


def score_corpus(pairs: Iterable[Tuple[GroupSet, GroupSet]]) -> MetricResult:
    """Macro-average score_pair over samples.

    accuracy_s and recall_s are each averaged across samples; avg is
    recomputed as their mean.
    """
    n = 0
    acc_sum = 0.0
    rec_sum = 0.0
    for annotated, predicted in pairs:
        result = score_pair(annotated, predicted)
        acc_sum += result.accuracy_s
        rec_sum += result.recall_s
        n += 1
    if n == 0:
        raise EmptyCorpus("no samples to score")
    accuracy_s = acc_sum / n
    recall_s = rec_sum / n
    return MetricResult(accuracy_s, recall_s, (accuracy_s + recall_s) / 2)


@dataclass(frozen=True)
class RunAggregate:
    """Mean and population std of one metric across repeated runs (percent)."""

    mean: float
    std: float
    n_runs: int
    per_run: tuple[float, ...]

    def formatted(self) -> str:
        return f"{format_percent(self.mean)}±{format_percent(self.std)}"


def aggregate_runs(per_run: Sequence[float]) -> RunAggregate:
    """Aggregate per-run percent scores.

    Std is the population standard deviation (divide by n), which for the
    two-run protocol equals half the range. A single run reports std 0.
    """
    if not per_run:
        raise ValueError("per_run is empty")
    runs = tuple(float(x) for x in per_run)
    mean = sum(runs) / len(runs)
    variance = sum((x - mean) ** 2 for x in runs) / len(runs)
    return RunAggregate(mean=mean, std=math.sqrt(variance), n_runs=len(runs), per_run=runs)


def format_percent(value: float) -> str:
    """Render a percent value with two decimals, half-even rounding."""
    quantized = Decimal(repr(float(value))).quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN)
    return f"{quantized:.2f}"
