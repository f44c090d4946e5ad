"""Split conformal prediction over a label hierarchy.

Two set constructions are provided:

- level-wise CP (L-CP): each level is calibrated and thresholded independently, which
  keeps each level's sets as tight as its own model allows but may produce sets that
  contradict each other across levels.
- projection-based CP (P-CP): only the terminal-leaf layer is calibrated; coarser sets
  are the ancestors of the retained leaves, so sets are nested and consistent.
"""

import logging
import math
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass
from enum import StrEnum
from functools import cache
from pathlib import Path

import numpy as np
import pandas as pd

from hiercp import HierCPError
from hiercp.taxonomy import LEAF_LEVEL, Level, Taxonomy, parse_level

logger = logging.getLogger(__name__)

# lower clamp for -log(p)
MIN_PROBABILITY = 1e-12

# guards the quantile rank against float error, e.g. (9 + 1) * (1 - 0.1) > 9
RANK_TOLERANCE = 1e-9

# row sums of a probability table must be within ROW_SUM_TOLERANCE of 1; rows read from
# files within FILE_ROW_SUM_TOLERANCE are renormalized first
ROW_SUM_TOLERANCE = 1e-6
FILE_ROW_SUM_TOLERANCE = 1e-3


class ConformalError(HierCPError):
    """Exception raised for mismatched tables, thresholds or taxonomies.

    Attributes:
        level: the level at which the mismatch was found, if any
    """

    def __init__(self, message: str, level: Level | None = None) -> None:
        """Initialize ConformalError instance."""
        self.level = level
        super().__init__(message)


class ScoreKind(StrEnum):
    ONE_MINUS = "one_minus"
    NEG_LOG = "neg_log"


class Method(StrEnum):
    LCP = "lcp"
    PCP = "pcp"


@dataclass(frozen=True, eq=False)
class ProbabilityTable:
    """Class-probability rows for a batch of samples at one level."""

    level: Level
    class_order: tuple[str, ...]
    rows: np.ndarray

    def __post_init__(self) -> None:
        """Validate shape and that rows are probability distributions."""
        width = len(self.class_order)
        if self.rows.ndim != 2 or self.rows.shape[1] != width:  # noqa: PLR2004
            message = (
                f"Probability table for level {self.level} has shape "
                f"{self.rows.shape}, expected (n, {len(self.class_order)})"
            )
            raise ConformalError(message, self.level)
        if self.rows.size and (
            (self.rows < 0).any()
            or (self.rows > 1 + 1e-9).any()
            or not np.allclose(self.rows.sum(axis=1), 1.0, atol=ROW_SUM_TOLERANCE)
        ):
            message = f"Rows of the level {self.level} table are not distributions"
            raise ConformalError(message, self.level)

    def __len__(self) -> int:
        return int(self.rows.shape[0])

    def check_against(self, taxonomy: Taxonomy) -> None:
        expected = taxonomy.class_order(self.level)
        if self.class_order != expected:
            message = (
                f"Column order of the level {self.level} probability table does not "
                "match the taxonomy order"
            )
            raise ConformalError(message, self.level)


@dataclass(frozen=True)
class CalibratedThreshold:
    level: Level
    alpha: float
    q_hat: float
    n_cal: int


@dataclass(frozen=True)
class HierPredictionSets:
    """Prediction sets of one sample, keyed by level."""

    method: Method
    sets: Mapping[Level, frozenset[str]]

    def __getitem__(self, level: Level) -> frozenset[str]:
        return self.sets[level]


def nonconformity(
    p: float | np.ndarray, kind: ScoreKind = ScoreKind.ONE_MINUS
) -> np.ndarray:
    """Score how atypical a label is given its probability; smaller is more conforming."""
    probabilities = np.asarray(p, dtype=np.float64)
    if kind == ScoreKind.ONE_MINUS:
        return 1.0 - probabilities
    return -np.log(np.maximum(probabilities, MIN_PROBABILITY))


def quantile_rank(n_cal: int, alpha: float) -> int:
    """Rank of the conservative quantile, ceil((n + 1)(1 - alpha))."""
    return math.ceil((n_cal + 1) * (1.0 - alpha) - RANK_TOLERANCE)


def calibrate_level(
    scores: Sequence[float] | np.ndarray, alpha: float, level: Level = LEAF_LEVEL
) -> CalibratedThreshold:
    """Compute the conservative empirical quantile of calibration scores.

    The threshold is the r-th smallest score with r = ceil((n + 1)(1 - alpha)). When
    r exceeds n (always the case for alpha = 0, or with too few calibration samples)
    the threshold is +inf and every label is predicted.
    """
    if not 0 <= alpha < 1:
        message = f"alpha must be in [0, 1), got {alpha}"
        raise ConformalError(message, level)
    values = np.sort(np.asarray(scores, dtype=np.float64))
    if not np.isfinite(values).all():
        message = f"Calibration scores for level {level} must be finite"
        raise ConformalError(message, level)
    n_cal = len(values)
    rank = quantile_rank(n_cal, alpha)
    q_hat = math.inf if rank > n_cal else float(values[max(rank, 1) - 1])
    if math.isinf(q_hat) and alpha > 0:
        logger.warning(
            "Level %s threshold saturated at alpha=%s with %i calibration samples",
            level,
            alpha,
            n_cal,
        )
    return CalibratedThreshold(level=level, alpha=alpha, q_hat=q_hat, n_cal=n_cal)


def calibration_scores(
    table: ProbabilityTable, labels: np.ndarray, kind: ScoreKind = ScoreKind.ONE_MINUS
) -> np.ndarray:
    """Score each calibration row at its true label, skipping undefined labels (-1)."""
    if len(labels) != len(table):
        message = f"{len(labels)} labels for {len(table)} probability rows"
        raise ConformalError(message, table.level)
    defined = labels >= 0
    rows = np.flatnonzero(defined)
    return nonconformity(table.rows[rows, labels[defined]], kind)


def calibrate_tables(
    tables: Mapping[Level, ProbabilityTable],
    labels: Mapping[Level, np.ndarray],
    alphas: Mapping[Level, float],
    kind: ScoreKind = ScoreKind.ONE_MINUS,
) -> dict[Level, CalibratedThreshold]:
    """Calibrate one threshold per level, each at its own alpha."""
    thresholds = {}
    for level, table in tables.items():
        scores = calibration_scores(table, labels[level], kind)
        thresholds[level] = calibrate_level(scores, alphas[level], level)
        logger.debug(
            "Level %s: alpha=%s n_cal=%i q_hat=%s",
            level,
            alphas[level],
            thresholds[level].n_cal,
            thresholds[level].q_hat,
        )
    return thresholds


def threshold_mask(
    table: ProbabilityTable,
    threshold: CalibratedThreshold,
    kind: ScoreKind = ScoreKind.ONE_MINUS,
) -> np.ndarray:
    """Boolean (n, m) membership matrix of labels whose score is <= q_hat."""
    if threshold.level != table.level:
        message = (
            f"Threshold for level {threshold.level} applied to the level {table.level} "
            "table"
        )
        raise ConformalError(message, table.level)
    return nonconformity(table.rows, kind) <= threshold.q_hat


@cache
def ancestor_columns(taxonomy: Taxonomy, level: int) -> np.ndarray:
    """Map each terminal leaf to its level-k ancestor's column, -1 if undefined."""
    position = {name: i for i, name in enumerate(taxonomy.level_nodes(level))}
    return np.array(
        [
            -1 if (ancestor := taxonomy.ancestor_at_level(leaf, level)) is None
            else position[ancestor]
            for leaf in taxonomy.leaves
        ],
        dtype=np.int64,
    )


def project_leaf_mask(
    leaf_mask: np.ndarray, taxonomy: Taxonomy, level: int
) -> np.ndarray:
    """Project a leaf membership matrix onto a depth level as the union of ancestors."""
    columns = ancestor_columns(taxonomy, level)
    projected = np.zeros((leaf_mask.shape[0], len(taxonomy.level_nodes(level))), bool)
    rows, leaves = np.nonzero(leaf_mask[:, columns >= 0])
    projected[rows, columns[columns >= 0][leaves]] = True
    return projected


@dataclass(frozen=True, eq=False)
class PredictionBatch:
    """Prediction sets of a batch of samples as per-level membership matrices."""

    method: Method
    taxonomy: Taxonomy
    masks: Mapping[Level, np.ndarray]

    def __len__(self) -> int:
        return int(next(iter(self.masks.values())).shape[0])

    def __getitem__(self, index: int) -> HierPredictionSets:
        return HierPredictionSets(
            self.method,
            {
                level: frozenset(
                    name
                    for name, member in zip(
                        self.taxonomy.class_order(level), mask[index], strict=True
                    )
                    if member
                )
                for level, mask in self.masks.items()
            },
        )

    def __iter__(self) -> Iterator[HierPredictionSets]:
        for index in range(len(self)):
            yield self[index]


def _check_row_counts(tables: Sequence[ProbabilityTable]) -> None:
    if len({len(table) for table in tables}) > 1:
        message = "Probability tables have different row counts"
        raise ConformalError(message)


def lcp_predict(
    tables: Mapping[Level, ProbabilityTable],
    thresholds: Mapping[Level, CalibratedThreshold],
    taxonomy: Taxonomy,
    kind: ScoreKind = ScoreKind.ONE_MINUS,
) -> PredictionBatch:
    """Threshold every level independently.

    Sets may be empty and need not agree across levels.
    """
    if set(tables) != set(thresholds):
        message = (
            f"Tables for levels {sorted(map(str, tables))} but thresholds for levels "
            f"{sorted(map(str, thresholds))}"
        )
        raise ConformalError(message)
    _check_row_counts(list(tables.values()))
    masks = {}
    for level in taxonomy.reported_levels:
        if level not in tables:
            continue
        tables[level].check_against(taxonomy)
        masks[level] = threshold_mask(tables[level], thresholds[level], kind)
    return PredictionBatch(Method.LCP, taxonomy, masks)


def pcp_predict(
    leaf_table: ProbabilityTable,
    leaf_threshold: CalibratedThreshold,
    taxonomy: Taxonomy,
    kind: ScoreKind = ScoreKind.ONE_MINUS,
) -> PredictionBatch:
    """Threshold the leaf layer and project the retained leaves upwards.

    The level-k set is the set of level-k ancestors of retained leaves, which makes the
    sets nested: every member's parent is a member of the level above.
    """
    if leaf_table.level != LEAF_LEVEL:
        message = f"P-CP needs the leaf table, got the level {leaf_table.level} table"
        raise ConformalError(message, leaf_table.level)
    leaf_table.check_against(taxonomy)
    leaf_mask = threshold_mask(leaf_table, leaf_threshold, kind)
    masks: dict[Level, np.ndarray] = {
        level: project_leaf_mask(leaf_mask, taxonomy, level)
        for level in range(1, taxonomy.depth + 1)
    }
    masks[LEAF_LEVEL] = leaf_mask
    return PredictionBatch(Method.PCP, taxonomy, masks)


def is_nested(sets: HierPredictionSets, taxonomy: Taxonomy) -> bool:
    """Check that every depth-level member's parent is predicted one level up."""
    for level in range(2, taxonomy.depth + 1):
        for name in sets.sets.get(level, frozenset()):
            if taxonomy.parent_of(name) not in sets.sets.get(level - 1, frozenset()):
                return False
    return True


def read_probability_table(
    path: str | Path, level: Level, taxonomy: Taxonomy
) -> ProbabilityTable:
    """Read a probability CSV whose header must match the level's taxonomy order.

    Rows whose sums miss 1 by more than `ROW_SUM_TOLERANCE` but at most
    `FILE_ROW_SUM_TOLERANCE` are renormalized, so tables rounded to a few decimals by
    an external classifier are accepted.
    """
    frame = pd.read_csv(path, dtype=np.float64, float_precision="round_trip")
    rows = frame.to_numpy()
    if rows.ndim == 2 and rows.size:  # noqa: PLR2004
        sums = rows.sum(axis=1, keepdims=True)
        deviation = np.abs(sums - 1.0)
        if (deviation <= FILE_ROW_SUM_TOLERANCE).all():
            rows = np.where(deviation > ROW_SUM_TOLERANCE, rows / sums, rows)
    table = ProbabilityTable(
        level, tuple(str(column) for column in frame.columns), rows
    )
    table.check_against(taxonomy)
    return table


def write_probability_table(path: str | Path, table: ProbabilityTable) -> None:
    frame = pd.DataFrame(table.rows, columns=list(table.class_order))
    frame.to_csv(path, index=False, lineterminator="\n")


def write_thresholds(path: str | Path, thresholds: Sequence[CalibratedThreshold]) -> None:
    with open(path, "w", encoding="utf-8") as threshold_file:
        threshold_file.write("level,alpha,n_cal,q_hat\n")
        for threshold in thresholds:
            threshold_file.write(
                f"{threshold.level},{threshold.alpha!r},{threshold.n_cal},"
                f"{threshold.q_hat!r}\n"
            )


def read_thresholds(path: str | Path) -> dict[Level, CalibratedThreshold]:
    with open(path, encoding="utf-8") as threshold_file:
        lines = [line.strip() for line in threshold_file if line.strip()]
    if not lines or lines[0] != "level,alpha,n_cal,q_hat":
        message = f"Threshold file {path} must start with 'level,alpha,n_cal,q_hat'"
        raise ConformalError(message)
    thresholds: dict[Level, CalibratedThreshold] = {}
    for line in lines[1:]:
        fields = line.split(",")
        if len(fields) != 4:  # noqa: PLR2004
            message = f"Malformed threshold line '{line}'"
            raise ConformalError(message)
        level = parse_level(fields[0])
        try:
            thresholds[level] = CalibratedThreshold(
                level=level,
                alpha=float(fields[1]),
                n_cal=int(fields[2]),
                q_hat=float(fields[3]),
            )
        except ValueError as exc:
            message = f"Malformed threshold line '{line}'"
            raise ConformalError(message, level) from exc
    return thresholds


def format_prediction_line(sets: HierPredictionSets, taxonomy: Taxonomy) -> str:
    """Format one sample as `level:{name;name}` groups separated by `|`.

    Names within a group follow taxonomy order so output is reproducible.
    """
    groups = []
    for level in taxonomy.reported_levels:
        if level not in sets.sets:
            continue
        members = [name for name in taxonomy.class_order(level) if name in sets[level]]
        groups.append(f"{level}:{{{';'.join(members)}}}")
    return "|".join(groups)


def parse_prediction_line(
    line: str, method: Method, taxonomy: Taxonomy
) -> HierPredictionSets:
    sets: dict[Level, frozenset[str]] = {}
    for group in line.strip().split("|"):
        level_text, _, body = group.partition(":")
        if not (body.startswith("{") and body.endswith("}")):
            message = f"Malformed prediction-set group '{group}'"
            raise ConformalError(message)
        level = parse_level(level_text)
        names = frozenset(name for name in body[1:-1].split(";") if name)
        unknown = names - set(taxonomy.class_order(level))
        if unknown:
            message = f"Unknown level {level} labels in prediction set: {sorted(unknown)}"
            raise ConformalError(message, level)
        sets[level] = names
    return HierPredictionSets(method, sets)


def write_prediction_sets(
    path: str | Path,
    batch: Iterable[HierPredictionSets],
    taxonomy: Taxonomy,
) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as prediction_file:
        for sets in batch:
            prediction_file.write(format_prediction_line(sets, taxonomy) + "\n")
            count += 1
    return count


def read_prediction_sets(
    path: str | Path, method: Method, taxonomy: Taxonomy
) -> list[HierPredictionSets]:
    with open(path, encoding="utf-8") as prediction_file:
        return [
            parse_prediction_line(line, method, taxonomy)
            for line in prediction_file
            if line.strip()
        ]
