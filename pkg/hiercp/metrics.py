"""Validity, efficiency and structural-consistency metrics for hierarchical sets."""

import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from functools import cache
from pathlib import Path

import numpy as np
import pandas as pd

from hiercp import HierCPError
from hiercp.conformal import HierPredictionSets, Method, PredictionBatch
from hiercp.taxonomy import Level, Taxonomy

logger = logging.getLogger(__name__)

COVERAGE = "coverage"
MEAN_SET_SIZE = "mean_set_size"
EMPTY_RATE = "empty_rate"
SINGLETON_RATE = "singleton_rate"
HIR = "hir"
ORPHAN_RATE = "orphan_rate"
STERILE_RATE = "sterile_rate"

LEVEL_METRICS = (COVERAGE, MEAN_SET_SIZE, EMPTY_RATE, SINGLETON_RATE)
GLOBAL_METRICS = (HIR, ORPHAN_RATE, STERILE_RATE)
GLOBAL_LEVEL = "global"

REPORT_COLUMNS = [
    "method",
    "alpha",
    "level",
    "metric",
    "mean",
    "std",
    "n_iterations",
    "n_samples_effective",
]


class MetricsError(HierCPError):
    """Exception raised for empty batches, missing levels or heterogeneous runs."""


def _check_batch(sets: Sequence[frozenset[str]]) -> None:
    if len(sets) == 0:
        message = "Cannot compute a set metric over an empty batch"
        raise MetricsError(message)


def coverage(
    sets: Sequence[frozenset[str]], labels: Sequence[str | None]
) -> float | None:
    """Fraction of samples whose defined label is in their set; None if none defined."""
    if len(sets) != len(labels):
        message = f"{len(sets)} prediction sets but {len(labels)} labels"
        raise MetricsError(message)
    hits = [
        label in members
        for members, label in zip(sets, labels, strict=True)
        if label is not None
    ]
    if not hits:
        return None
    return sum(hits) / len(hits)


def mean_set_size(sets: Sequence[frozenset[str]]) -> float:
    _check_batch(sets)
    return sum(len(members) for members in sets) / len(sets)


def empty_rate(sets: Sequence[frozenset[str]]) -> float:
    _check_batch(sets)
    return sum(len(members) == 0 for members in sets) / len(sets)


def singleton_rate(sets: Sequence[frozenset[str]]) -> float:
    _check_batch(sets)
    return sum(len(members) == 1 for members in sets) / len(sets)


@dataclass(frozen=True)
class Violations:
    """Violating edges of one sample, keyed by the parent level k of the pair (k, k+1).

    Attributes:
        orphan: level-(k+1) members whose parent is missing from the level-k set
        sterile: level-k non-leaf members with none of their children at level k+1
    """

    orphan: Mapping[int, frozenset[str]] = field(default_factory=dict)
    sterile: Mapping[int, frozenset[str]] = field(default_factory=dict)

    @property
    def has_orphan(self) -> bool:
        return any(self.orphan.values())

    @property
    def has_sterile(self) -> bool:
        return any(self.sterile.values())

    @property
    def violated(self) -> bool:
        return self.has_orphan or self.has_sterile


def sample_violations(
    level_sets: Mapping[Level, frozenset[str]], t: Taxonomy
) -> Violations:
    """Find orphan and sterile edges between every pair of adjacent depth levels."""
    missing = [level for level in range(1, t.depth + 1) if level not in level_sets]
    if missing:
        message = f"Prediction sets are missing level(s) {missing}"
        raise MetricsError(message)
    orphan = {}
    sterile = {}
    for level in range(1, t.depth):
        upper, lower = level_sets[level], level_sets[level + 1]
        orphan[level] = frozenset(y for y in lower if t.parent_of(y) not in upper)
        sterile[level] = frozenset(
            y
            for y in upper
            if t.children_of(y) and not lower.intersection(t.children_of(y))
        )
    return Violations(orphan, sterile)


@dataclass(frozen=True)
class HIRResult:
    rate: float
    orphan_rate: float
    sterile_rate: float
    violations: tuple[Violations, ...]


def hir(
    all_level_sets: Sequence[HierPredictionSets | Mapping[Level, frozenset[str]]],
    t: Taxonomy,
) -> HIRResult:
    """Hierarchical inconsistency rate: share of samples with at least one violation."""
    if len(all_level_sets) == 0:
        message = "Cannot compute HIR over an empty batch"
        raise MetricsError(message)
    violations = tuple(
        sample_violations(
            sets.sets if isinstance(sets, HierPredictionSets) else sets, t
        )
        for sets in all_level_sets
    )
    n = len(violations)
    return HIRResult(
        rate=sum(v.violated for v in violations) / n,
        orphan_rate=sum(v.has_orphan for v in violations) / n,
        sterile_rate=sum(v.has_sterile for v in violations) / n,
        violations=violations,
    )


@dataclass(frozen=True)
class LevelEvaluation:
    set_size: int
    covered: bool | None
    empty: bool
    singleton: bool


@dataclass(frozen=True)
class SampleEvaluation:
    levels: Mapping[Level, LevelEvaluation]
    violation: bool


def evaluate_sample(
    sets: HierPredictionSets, leaf_label: str, t: Taxonomy
) -> SampleEvaluation:
    levels = {}
    for level, members in sets.sets.items():
        label = t.label_at(leaf_label, level)
        levels[level] = LevelEvaluation(
            set_size=len(members),
            covered=None if label is None else label in members,
            empty=not members,
            singleton=len(members) == 1,
        )
    return SampleEvaluation(levels, sample_violations(sets.sets, t).violated)


@cache
def _parent_columns(t: Taxonomy, level: int) -> np.ndarray:
    """Column of each level-(k+1) node's parent within level k."""
    position = {name: i for i, name in enumerate(t.level_nodes(level))}
    return np.array(
        [position[t.parent_of(child)] for child in t.level_nodes(level + 1)],
        dtype=np.int64,
    )


@cache
def _parent_incidence(t: Taxonomy, level: int) -> np.ndarray:
    """(m_{k+1}, m_k) 0/1 matrix linking each level-(k+1) node to its parent."""
    parents = _parent_columns(t, level)
    incidence = np.zeros((len(parents), len(t.level_nodes(level))), dtype=np.int64)
    incidence[np.arange(len(parents)), parents] = 1
    return incidence


@cache
def _has_children(t: Taxonomy, level: int) -> np.ndarray:
    return np.array([bool(t.children_of(name)) for name in t.level_nodes(level)])


def violation_masks(
    masks: Mapping[Level, np.ndarray], t: Taxonomy
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample orphan and sterile indicators computed on membership matrices."""
    n = next(iter(masks.values())).shape[0]
    orphan = np.zeros(n, dtype=bool)
    sterile = np.zeros(n, dtype=bool)
    for level in range(1, t.depth):
        upper, lower = masks[level], masks[level + 1]
        parents = _parent_columns(t, level)
        orphan |= (lower & ~upper[:, parents]).any(axis=1)
        child_hits = lower.astype(np.int64) @ _parent_incidence(t, level)
        sterile |= (upper & _has_children(t, level) & (child_hits == 0)).any(axis=1)
    return orphan, sterile


@dataclass(frozen=True)
class MetricsRun:
    """Metric values of one method at one alpha in one iteration.

    Keys are (level, metric) with level written as in the report ("1", "leaf",
    "global"). A None value means the metric is undefined for this run.
    """

    method: Method
    alpha: float
    values: Mapping[tuple[str, str], float | None]
    n_effective: Mapping[tuple[str, str], int]


def evaluate_batch(
    batch: PredictionBatch, labels: Mapping[Level, np.ndarray], alpha: float
) -> MetricsRun:
    """Compute all metrics for a batch from membership matrices and label codes.

    Coverage counts only samples whose level label is defined; set-size, empty and
    singleton rates use every sample.
    """
    n = len(batch)
    if n == 0:
        message = "Cannot evaluate an empty batch"
        raise MetricsError(message)
    values: dict[tuple[str, str], float | None] = {}
    n_effective: dict[tuple[str, str], int] = {}
    for level in batch.taxonomy.reported_levels:
        if level not in batch.masks:
            continue
        mask = batch.masks[level]
        codes = labels[level]
        sizes = mask.sum(axis=1)
        defined = codes >= 0
        n_defined = int(defined.sum())
        key = str(level)
        values[key, COVERAGE] = (
            float(mask[np.flatnonzero(defined), codes[defined]].mean())
            if n_defined
            else None
        )
        values[key, MEAN_SET_SIZE] = float(sizes.mean())
        values[key, EMPTY_RATE] = float((sizes == 0).mean())
        values[key, SINGLETON_RATE] = float((sizes == 1).mean())
        n_effective[key, COVERAGE] = n_defined
        for metric in (MEAN_SET_SIZE, EMPTY_RATE, SINGLETON_RATE):
            n_effective[key, metric] = n
    orphan, sterile = violation_masks(batch.masks, batch.taxonomy)
    values[GLOBAL_LEVEL, HIR] = float((orphan | sterile).mean())
    values[GLOBAL_LEVEL, ORPHAN_RATE] = float(orphan.mean())
    values[GLOBAL_LEVEL, STERILE_RATE] = float(sterile.mean())
    for metric in GLOBAL_METRICS:
        n_effective[GLOBAL_LEVEL, metric] = n
    return MetricsRun(batch.method, alpha, values, n_effective)


@dataclass(frozen=True)
class MetricSummary:
    mean: float | None
    std: float | None
    n_iterations: int
    n_samples_effective: int


@dataclass(frozen=True)
class MetricsReport:
    """Mean and sample standard deviation of every metric over iterations."""

    method: Method
    alpha: float
    summaries: Mapping[tuple[str, str], MetricSummary]

    def mean(self, level: Level | str, metric: str) -> float | None:
        return self.summaries[str(level), metric].mean

    def std(self, level: Level | str, metric: str) -> float | None:
        return self.summaries[str(level), metric].std

    @property
    def levels(self) -> list[str]:
        return list(dict.fromkeys(level for level, _ in self.summaries))


def _sample_std(values: np.ndarray) -> float | None:
    if len(values) == 0:
        return None
    if len(values) == 1:
        return 0.0
    return float(values.std(ddof=1))


def aggregate(runs: Sequence[MetricsRun]) -> MetricsReport:
    """Summarize runs of one method and alpha as mean and (n - 1) standard deviation.

    Undefined values are skipped; a single defined value has standard deviation 0.
    """
    if not runs:
        message = "Cannot aggregate zero runs"
        raise MetricsError(message)
    first = runs[0]
    for run in runs[1:]:
        if (
            run.method != first.method
            or run.alpha != first.alpha
            or run.values.keys() != first.values.keys()
        ):
            message = "Cannot aggregate runs with different methods, alphas or metrics"
            raise MetricsError(message)
    summaries = {}
    for key in first.values:
        defined = [run.values[key] for run in runs if run.values[key] is not None]
        values = np.array(defined, dtype=np.float64)
        summaries[key] = MetricSummary(
            mean=float(values.mean()) if len(values) else None,
            std=_sample_std(values),
            n_iterations=len(values),
            n_samples_effective=sum(run.n_effective[key] for run in runs),
        )
    return MetricsReport(first.method, first.alpha, summaries)


def report_frame(reports: Sequence[MetricsReport]) -> pd.DataFrame:
    rows = [
        {
            "method": str(report.method),
            "alpha": report.alpha,
            "level": level,
            "metric": metric,
            "mean": summary.mean,
            "std": summary.std,
            "n_iterations": summary.n_iterations,
            "n_samples_effective": summary.n_samples_effective,
        }
        for report in reports
        for (level, metric), summary in report.summaries.items()
    ]
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def write_report(path: str | Path, reports: Sequence[MetricsReport]) -> None:
    report_frame(reports).to_csv(path, index=False, lineterminator="\n")
    logger.info(
        "Metrics report with %i method/alpha groups written to %s", len(reports), path
    )


def format_summary(summary: MetricSummary) -> str:
    if summary.mean is None or summary.std is None or math.isnan(summary.mean):
        return "n/a"
    return f"{summary.mean:.3f} ± {summary.std:.3f}"
